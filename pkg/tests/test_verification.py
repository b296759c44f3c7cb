import json

import numpy as np
import pytest

from scanattn import (
    AttentionOutput,
    GeneratorSpec,
    NumericalError,
    Precision,
    ScanConfig,
    ShapeError,
    Tensor4,
    block_validation,
    bound_check,
    drift_metrics,
    generate,
    naive_attention,
    scan_depth,
    scan_forward,
    vectorized_oracle,
)
from scanattn.verify import nearest_rank_percentiles

U32 = Precision.FP32.unit_roundoff


def problem(seed, n, d=16, d_v=16, b=1, h=1, scenario="regular",
            precision=Precision.FP64):
    return generate(GeneratorSpec(seed=seed, scenario=scenario, b=b, h=h, n=n,
                                  d=d, d_v=d_v, precision=precision))


class TestNearestRank:
    def test_known_values(self):
        samples = np.arange(1, 101, dtype=float)
        pct = nearest_rank_percentiles(samples)
        assert pct == {"median": 50.0, "p95": 95.0, "p99": 99.0}

    def test_single_sample(self):
        assert nearest_rank_percentiles([7.0])["p99"] == 7.0


class TestDriftMetrics:
    def make_outputs(self, seed=0, n=32):
        p = problem(seed, n=n)
        ref = naive_attention(p, materialize_P=True)
        return p, ref

    def test_self_comparison_is_zero(self):
        _, ref = self.make_outputs()
        rep = drift_metrics(ref, ref)
        for name, val in rep.metrics().items():
            assert val == 0.0, name
        assert rep.arg_rate == 0.0

    def test_single_output_perturbation(self):
        _, ref = self.make_outputs()
        y = ref.Y.data.copy()
        y[0, 0, 3, 2] += 1e-8
        cand = AttentionOutput(Tensor4(y), ref.P)
        rep = drift_metrics(cand, ref)
        np.testing.assert_allclose(rep.max_abs_Y, 1e-8, rtol=1e-6)

    def test_perturbation_monotonicity(self):
        _, ref = self.make_outputs()
        reports = []
        for eps in (1e-10, 1e-8, 1e-6):
            pm = ref.P.data.copy()
            pm[0, 0, 1, 1] += eps
            cand = AttentionOutput(ref.Y, Tensor4(pm))
            reports.append(drift_metrics(cand, ref).max_abs_P)
        assert reports[0] <= reports[1] <= reports[2]

    def test_js_symmetry(self):
        p, ref = self.make_outputs(seed=1)
        cand = AttentionOutput(ref.Y, vectorized_oracle(p, Precision.FP32).P)
        fwd = drift_metrics(cand, ref).js_mean
        rev = drift_metrics(ref, cand).js_mean
        assert abs(fwd - rev) <= 1e-15

    def test_fp64_scan_vs_oracle_tier(self):
        p = problem(2, n=128, b=2, h=2, d=32, d_v=32)
        out, _ = scan_forward(p, ScanConfig(block_size=64))
        ref = naive_attention(p, materialize_P=True)
        cand = AttentionOutput(out.Y, vectorized_oracle(p, Precision.FP64).P)
        rep = drift_metrics(cand, ref, p_source="recomputed")
        assert rep.arg_rate == 0.0
        for name, pct in rep.percentiles.items():
            assert pct["p95"] <= 1e-13, (name, pct)

    def test_shape_mismatch_rejected(self):
        _, ref = self.make_outputs()
        p2 = problem(3, n=16)
        other = naive_attention(p2)
        with pytest.raises(ShapeError):
            drift_metrics(other, ref)

    def test_unnormalizable_reference_rejected(self):
        _, ref = self.make_outputs(n=4)
        bad_p = np.zeros_like(ref.P.data)
        bad = AttentionOutput(ref.Y, Tensor4(bad_p))
        with pytest.raises(NumericalError):
            drift_metrics(ref, bad)

    def test_missing_p_yields_y_only_report(self):
        _, ref = self.make_outputs()
        cand = AttentionOutput(ref.Y, None)
        rep = drift_metrics(cand, ref)
        assert rep.max_abs_P is None and rep.arg_rate is None
        assert rep.max_abs_Y == 0.0
        assert rep.p_source == "absent"

    def test_json_and_csv_round_trip(self):
        _, ref = self.make_outputs()
        rep = drift_metrics(ref, ref, scenario="regular")
        doc = json.loads(rep.to_json())
        for name in ("max_abs_P", "rel_l2_P", "js_mean", "arg_rate", "max_abs_Y", "rel_l2_Y"):
            assert name in doc
        header = rep.csv_header()
        row = rep.csv_row()
        assert len(header.split(",")) == len(row.split(","))


class TestBlockValidation:
    def test_single_block_partition(self):
        n = 128
        p = problem(4, n=n)
        rep = block_validation(p, ScanConfig(), [n])
        assert rep.max_vs_sequential_dev <= 1e-12

    def test_all_singleton_leaves(self):
        n = 128
        p = problem(5, n=n)
        rep = block_validation(p, ScanConfig(), [1])
        assert rep.max_vs_sequential_dev <= 1e-12

    def test_partition_sweep(self):
        n = 256
        p = problem(6, n=n, b=2, h=2)
        rep = block_validation(p, ScanConfig(), [1, 2, 16, 128, n])
        assert rep.max_pairwise_dev <= 1e-12
        assert rep.max_vs_sequential_dev <= 1e-12
        assert rep.passed(1e-12)

    def test_rejects_bad_partition(self):
        p = problem(7, n=16)
        with pytest.raises(ShapeError):
            block_validation(p, ScanConfig(), [0])

    def test_report_dict(self):
        p = problem(8, n=32)
        rep = block_validation(p, ScanConfig(), [8, 32])
        doc = rep.to_dict()
        assert set(doc["per_partition_dev"]) == {"8", "32"}


class TestBoundCheck:
    def test_requires_fp32(self):
        p = problem(9, n=16)
        with pytest.raises(ShapeError):
            bound_check(p, ScanConfig(precision=Precision.FP64))

    def test_single_token_trivial(self):
        p = problem(10, n=1, precision=Precision.FP32)
        rep = bound_check(p, ScanConfig(precision=Precision.FP32))
        assert rep.passed and rep.max_row_error <= rep.threshold

    def test_rows_within_bound_n1024(self):
        p = problem(11, n=1024, d=16, d_v=8, precision=Precision.FP32)
        rep = bound_check(p, ScanConfig(block_size=128, precision=Precision.FP32))
        assert rep.depth == 16
        np.testing.assert_allclose(rep.threshold, 2**-24 * 16 * 8)
        assert rep.rows_failed == 0 and rep.passed

    def test_bound_value_at_16384(self):
        # the bound itself is arithmetic: u * L(16384, 128) before slack
        assert scan_depth(16384, 128) == 24
        np.testing.assert_allclose(U32 * 24, 1.430511474609375e-06)

    def test_bound_growth_is_logarithmic(self):
        b16384 = U32 * scan_depth(16384, 128)
        b1024 = U32 * scan_depth(1024, 128)
        assert b16384 / b1024 == 1.5

    def test_report_serializes(self):
        p = problem(12, n=64, precision=Precision.FP32)
        rep = bound_check(p, ScanConfig(precision=Precision.FP32))
        doc = rep.to_dict()
        assert doc["passed"] == rep.passed
        json.dumps(doc)


class TestArgmaxPreservation:
    @pytest.mark.parametrize("scenario,n,b,h", [
        ("regular", 256, 2, 2),
        ("long", 1024, 1, 1),
        ("stress", 512, 1, 2),
    ])
    def test_fp32_scan_never_moves_argmax(self, scenario, n, b, h):
        p = generate(GeneratorSpec(seed=13, scenario=scenario, b=b, h=h, n=n,
                                   d=32, d_v=32, precision=Precision.FP32))
        ref = naive_attention(p, Precision.FP64, materialize_P=True)
        cand_p = vectorized_oracle(p, Precision.FP32).P
        out, _ = scan_forward(p, ScanConfig(precision=Precision.FP32))
        rep = drift_metrics(AttentionOutput(out.Y, cand_p), ref, scenario=scenario,
                            p_source="recomputed")
        assert rep.arg_rate == 0.0
