import functools
import math

import numpy as np
import pytest

from scanattn import (
    GeneratorSpec,
    Precision,
    ScanConfig,
    ShapeError,
    StateTriple,
    blockwise_states,
    depth_cap,
    generate,
    identity,
    inter_block_combine,
    intra_block_scan,
    leaf_state,
    merge,
    merge_tree,
    naive_attention,
    scan_depth,
    scan_forward,
    sequential_state,
)


def rand_triples(rng, k, d_v=4):
    return [StateTriple(rng.uniform(-20, 20), rng.uniform(0, 5), rng.standard_normal(d_v))
            for _ in range(k)]


def problem(seed, n, d=16, d_v=16, b=1, h=1, precision=Precision.FP64):
    return generate(GeneratorSpec(seed=seed, scenario="regular", b=b, h=h, n=n,
                                  d=d, d_v=d_v, precision=precision))


class TestScanDepth:
    @pytest.mark.parametrize("n,B,expected", [
        (128, 128, 10),     # 7 + 0 + 3
        (1024, 128, 16),    # 7 + 2*3 + 3
        (16384, 128, 24),   # 7 + 2*7 + 3
        (256, 128, 12),     # 7 + 2*1 + 3
        (4096, 128, 20),
        (64, 128, 9),       # single block: ceil(log2 64) + 3
        (1, 1, 3),
    ])
    def test_values(self, n, B, expected):
        assert scan_depth(n, B) == expected

    def test_within_cap(self):
        assert scan_depth(16384, 128) <= depth_cap(16384) == 31

    def test_intra_term_vanishes_when_single_block(self):
        for n in (1, 2, 100, 128):
            assert scan_depth(n, 128) == math.ceil(math.log2(n)) + 3 if n > 1 else 3

    def test_rejects_bad_args(self):
        with pytest.raises(ShapeError):
            scan_depth(0, 128)
        with pytest.raises(ShapeError):
            scan_depth(128, 0)


class TestLeafState:
    def test_zero_vectors(self):
        t = leaf_state(np.zeros(3), np.zeros(3), np.array([1.0, 2.0]), 0.25)
        assert t.m == 0.0 and t.S == 1.0 and np.array_equal(t.W, [1.0, 2.0])

    def test_unit_vectors_d1(self):
        t = leaf_state(np.array([1.0]), np.array([1.0]), np.array([5.0]), 1.0)
        assert t.m == 1.0 and t.S == 1.0 and np.array_equal(t.W, [5.0])

    def test_dot_product_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q, k = rng.standard_normal((2, 4))
            v = rng.standard_normal(3)
            t = leaf_state(q, k, v, 0.5)
            acc = 0.0
            for a, b in zip(q, k):
                acc += a * b
            assert abs(t.m - 0.5 * acc) <= 2 * 4 * 2**-53 * max(abs(acc), 1.0)

    def test_shape_check(self):
        with pytest.raises(ShapeError):
            leaf_state(np.zeros(3), np.zeros(4), np.zeros(2), 1.0)


class TestIntraBlockScan:
    def test_single_leaf_unchanged(self):
        t = StateTriple(0.7, 1.0, np.array([2.0, 3.0]))
        out = intra_block_scan([t])
        assert out.m == t.m and out.S == t.S and np.array_equal(out.W, t.W)

    def test_identical_leaves_sum(self):
        l = StateTriple(0.0, 1.0, np.array([1.0]))
        out = intra_block_scan([l] * 4)
        assert out.m == 0.0 and out.S == 4.0 and np.array_equal(out.W, [4.0])

    def test_matches_left_fold(self):
        rng = np.random.default_rng(1)
        leaves = rand_triples(rng, 128)
        out = intra_block_scan(leaves)
        fold = functools.reduce(merge, leaves)
        np.testing.assert_allclose(out.S, fold.S, rtol=1e-12)
        np.testing.assert_allclose(out.W, fold.W, rtol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            intra_block_scan([])

    def test_non_power_of_two_lengths(self):
        rng = np.random.default_rng(2)
        for k in (3, 5, 17, 100):
            leaves = rand_triples(rng, k)
            out = intra_block_scan(leaves)
            fold = functools.reduce(merge, leaves)
            np.testing.assert_allclose(out.S, fold.S, rtol=1e-12)


class TestInterBlockCombine:
    def test_singleton(self):
        a = StateTriple(1.0, 2.0, np.array([3.0]))
        total, prefixes = inter_block_combine([a], return_prefixes=True)
        assert total.m == a.m and total.S == a.S
        assert len(prefixes) == 1 and prefixes[0].is_identity()

    def test_pair(self):
        rng = np.random.default_rng(3)
        a, b = rand_triples(rng, 2)
        total, prefixes = inter_block_combine([a, b], return_prefixes=True)
        ab = merge(a, b)
        assert total.m == ab.m and total.S == ab.S and np.array_equal(total.W, ab.W)
        assert prefixes[0].is_identity()
        assert prefixes[1].m == a.m and prefixes[1].S == a.S
        assert np.array_equal(prefixes[1].W, a.W)

    def test_upsweep_root_matches_merge_tree_bitwise(self):
        rng = np.random.default_rng(4)
        totals = rand_triples(rng, 8)
        root = inter_block_combine(totals)
        tree = merge_tree(totals)
        assert root.m == tree.m and root.S == tree.S
        assert np.array_equal(root.W, tree.W)

    def test_non_power_of_two_padding(self):
        rng = np.random.default_rng(5)
        for k in (3, 5, 6, 7):
            totals = rand_triples(rng, k)
            total, prefixes = inter_block_combine(totals, return_prefixes=True)
            fold = functools.reduce(merge, totals)
            np.testing.assert_allclose(total.S, fold.S, rtol=1e-12)
            for i in range(k):
                want = functools.reduce(merge, totals[:i], identity(4))
                if want.is_identity():
                    assert prefixes[i].is_identity()
                else:
                    np.testing.assert_allclose(prefixes[i].S, want.S, rtol=1e-12)
                    np.testing.assert_allclose(prefixes[i].W, want.W, rtol=1e-12)


class TestScanForward:
    def test_single_token_exact(self):
        p = problem(0, n=1, d=4, d_v=4)
        out, _ = scan_forward(p, ScanConfig())
        assert np.array_equal(out.Y.data[0, 0, 0], p.V.data[0, 0, 0])

    def test_matches_naive_and_preserves_argmax(self):
        from scanattn import vectorized_oracle
        p = problem(1, n=1024, d=32, d_v=32)
        out, _ = scan_forward(p, ScanConfig(block_size=128))
        ref = naive_attention(p, materialize_P=True)
        err = np.linalg.norm(out.Y.data - ref.Y.data, axis=-1)
        den = np.linalg.norm(ref.Y.data, axis=-1)
        assert (err / den).max() <= 1e-13
        p_rec = vectorized_oracle(p, Precision.FP64).P
        assert np.array_equal(p_rec.data.argmax(axis=-1), ref.P.data.argmax(axis=-1))

    def test_bitwise_identical_across_workers(self):
        p = problem(2, n=512, b=1, h=2)
        outs = []
        for w in (1, 2, 8, "auto"):
            out, _ = scan_forward(p, ScanConfig(block_size=64, tile_q=32, workers=w))
            outs.append(out.Y.data)
        for other in outs[1:]:
            assert np.array_equal(outs[0], other)

    def test_block_size_independence(self):
        p = problem(3, n=512)
        ys = []
        for B in (32, 64, 128, 256):
            out, _ = scan_forward(p, ScanConfig(block_size=B))
            ys.append(out.Y.data)
        for other in ys[1:]:
            num = np.linalg.norm(ys[0] - other)
            assert num / np.linalg.norm(ys[0]) <= 1e-12

    def test_partial_last_block(self):
        p = problem(4, n=300)
        out, _ = scan_forward(p, ScanConfig(block_size=128))
        ref = naive_attention(p)
        np.testing.assert_allclose(out.Y.data, ref.Y.data, rtol=1e-12, atol=1e-14)

    def test_fp32_mode_stays_fp32(self):
        p = problem(5, n=64, precision=Precision.FP32)
        out, _ = scan_forward(p, ScanConfig(precision=Precision.FP32))
        assert out.Y.dtype == np.float32

    def test_tile_not_dividing_n(self):
        p = problem(6, n=100)
        out, _ = scan_forward(p, ScanConfig(block_size=16, tile_q=48))
        ref = naive_attention(p)
        np.testing.assert_allclose(out.Y.data, ref.Y.data, rtol=1e-12, atol=1e-14)


class TestBlockwiseStates:
    def test_single_block_equals_sequential(self):
        n = 128
        p = problem(7, n=n)
        cfg = ScanConfig(block_size=n)
        states = blockwise_states(p, cfg, 5)
        assert len(states) == 1
        seq = sequential_state(p, Precision.FP64, 0, 0, 5)
        assert states[0].m == seq.m
        np.testing.assert_allclose(states[0].S, seq.S, rtol=1e-12)
        np.testing.assert_allclose(states[0].W, seq.W, rtol=1e-12)

    def test_two_blocks_compose_to_sequential(self):
        n = 256
        p = problem(8, n=n)
        states = blockwise_states(p, ScanConfig(), 0, block_size=128)
        assert len(states) == 2
        total = merge(states[0], states[1])
        seq = sequential_state(p, Precision.FP64, 0, 0, 0)
        np.testing.assert_allclose(total.S, seq.S, rtol=1e-12)
        np.testing.assert_allclose(total.W, seq.W, rtol=1e-12)

    def test_partition_sweep_agrees(self):
        n = 256
        p = problem(9, n=n)
        cfg = ScanConfig()
        totals = []
        for bs in (1, 2, 16, 128, n):
            states = blockwise_states(p, cfg, 3, block_size=bs)
            assert len(states) == -(-n // bs)
            totals.append(functools.reduce(merge, states))
        for t in totals[1:]:
            np.testing.assert_allclose(t.S, totals[0].S, rtol=1e-12)
            np.testing.assert_allclose(t.W, totals[0].W, rtol=1e-12)

    def test_index_out_of_range(self):
        p = problem(10, n=16)
        with pytest.raises(ShapeError):
            blockwise_states(p, ScanConfig(), 16)


class TestTrace:
    def intra_merges(self, length):
        total, d = 0, 1
        while d < length:
            total += length - d
            d <<= 1
        return total

    def expected_forward_merges(self, n, B):
        k_full, r = divmod(n, B)
        intra = k_full * self.intra_merges(B) + (self.intra_merges(r) if r else 0)
        K = k_full + (1 if r else 0)
        K_pad = 1 if K <= 1 else 2 ** math.ceil(math.log2(K))
        return intra + (K_pad - 1)

    def test_counts_match_schedule(self):
        n, B = 512, 128
        p = problem(11, n=n)
        _, tr = scan_forward(p, ScanConfig(block_size=B, trace=True))
        assert tr.merge_count == n * self.expected_forward_merges(n, B)
        assert tr.leaf_count == n * n
        assert tr.n_paths == n

    def test_depth_within_formula(self):
        for n, B in ((256, 128), (1024, 128), (512, 32), (100, 16), (64, 128)):
            p = problem(12, n=n, d=8, d_v=8)
            _, tr = scan_forward(p, ScanConfig(block_size=B, trace=True))
            assert tr.critical_depth <= scan_depth(n, B)

    def test_work_bracket(self):
        n, B = 1024, 128
        p = problem(13, n=n)
        _, tr = scan_forward(p, ScanConfig(block_size=B, trace=True))
        per_query = tr.merges_per_query
        n_blocks = n // B
        low = 0.5 * n_blocks * B * math.ceil(math.log2(B))
        high = 1.1 * (n * math.ceil(math.log2(B)) + 2 * (n // B) + B)
        assert low <= per_query <= high

    def test_merge_count_doubles_with_n(self):
        traces = {}
        for n in (512, 1024):
            p = problem(14, n=n, d=8, d_v=8)
            _, traces[n] = scan_forward(p, ScanConfig(block_size=128, trace=True))
        ratio = traces[1024].merges_per_query / traces[512].merges_per_query
        assert 1.9 <= ratio <= 2.1

    def test_leaf_count_quadruples_with_n(self):
        traces = {}
        for n in (512, 1024):
            p = problem(15, n=n, d=8, d_v=8)
            _, traces[n] = scan_forward(p, ScanConfig(block_size=128, trace=True))
        ratio = traces[1024].leaf_count / traces[512].leaf_count
        assert 3.8 <= ratio <= 4.2

    def test_totals_stable_across_workers(self):
        p = problem(16, n=256, b=2, h=2, d=8, d_v=8)
        t1, t8 = (scan_forward(p, ScanConfig(block_size=64, tile_q=64, workers=w, trace=True))[1]
                  for w in (1, 8))
        assert t1.merge_count == t8.merge_count
        assert t1.per_level_counts == t8.per_level_counts
        assert t1.critical_depth == t8.critical_depth

    def test_peak_memory_scales_linearly(self):
        peaks = {}
        for n in (512, 1024):
            p = problem(17, n=n, d=8, d_v=8)
            _, tr = scan_forward(p, ScanConfig(block_size=32, trace=True))
            peaks[n] = tr.peak_extra_memory
        ratio = peaks[1024] / peaks[512]
        assert 1.8 <= ratio <= 2.2


class TestScanConfig:
    def test_validation(self):
        with pytest.raises(ShapeError):
            ScanConfig(block_size=0)
        with pytest.raises(ShapeError):
            ScanConfig(tile_q=0)
        with pytest.raises(ShapeError):
            ScanConfig(workers=0)
        with pytest.raises(ShapeError):
            ScanConfig(workers="many")

    def test_auto_workers(self):
        assert ScanConfig(workers="auto").resolved_workers() >= 1
