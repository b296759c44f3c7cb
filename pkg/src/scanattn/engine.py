"""Blocked parallel-scan attention with depth and work instrumentation.

Per query, the n keys become n leaf summaries ``(logit, 1, value)``.
Contiguous blocks of ``block_size`` leaves reduce with a level-synchronous
doubling scan (every lane active each level, the shared-memory-friendly
schedule); block totals then combine with a two-pass pairwise sweep whose
up-sweep yields the full-range total and whose optional down-sweep yields
exclusive block prefixes.  Queries are processed in tiles that share the
streamed key/value data.

The reduction tree is fixed entirely by ``(n, block_size)``; the worker
count only partitions (batch, head, tile) units across threads, so output
bytes are identical for any worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError
from .monoid import Precision, StateTriple, identity, merge_lanes, merge_lanes_into
from .oracles import AttentionOutput
from .tensorio import Tensor4

__all__ = [
    "ScanConfig",
    "ScanTrace",
    "scan_depth",
    "depth_cap",
    "leaf_state",
    "intra_block_scan",
    "inter_block_combine",
    "scan_forward",
    "blockwise_states",
]


def _ceil_log2(x):
    return 0 if x <= 1 else int(math.ceil(math.log2(x)))


def scan_depth(n, block_size):
    """Merge levels along the deepest leaf-to-root path of the two-level
    scan: ceil(log2 B) intra-block, 2*ceil(log2 ceil(n/B)) inter-block,
    plus a fixed constant of 3."""
    if n < 1 or block_size < 1:
        raise ShapeError("n and block_size must be >= 1")
    b_eff = min(block_size, n)
    blocks = -(-n // block_size)
    return _ceil_log2(b_eff) + 2 * _ceil_log2(blocks) + 3


def depth_cap(n):
    """Block-size-independent ceiling 2*ceil(log2 n) + 3."""
    return 2 * _ceil_log2(n) + 3


@dataclass(frozen=True)
class ScanConfig:
    """Knobs of the blocked scan.

    ``workers`` may be a positive integer or "auto" (the CPU count); the
    result is bitwise independent of it.  ``tile_q`` trades working-set
    size against data reuse while streaming keys and values.
    """

    block_size: int = 128
    tile_q: int = 64
    workers: int | str = 1
    precision: Precision = Precision.FP64
    trace: bool = False

    def __post_init__(self):
        if self.block_size < 1:
            raise ShapeError(f"block_size must be >= 1, got {self.block_size}")
        if self.tile_q < 1:
            raise ShapeError(f"tile_q must be >= 1, got {self.tile_q}")
        if self.workers != "auto" and (not isinstance(self.workers, int) or self.workers < 1):
            raise ShapeError(f"workers must be a positive integer or 'auto', got {self.workers!r}")
        if not isinstance(self.precision, Precision):
            raise ShapeError("precision must be a Precision value")

    def resolved_workers(self):
        return os.cpu_count() or 1 if self.workers == "auto" else self.workers


@dataclass
class ScanTrace:
    """Instrumented combine counts and critical-path depth.

    ``merge_count`` totals every lane-level combine performed;
    ``critical_depth`` is the maximum number of merge levels on any
    leaf-to-root path; ``per_level_counts[i]`` is the combine count at
    level i (intra-block levels first, then inter-block sweep levels).
    ``peak_extra_memory`` is the per-worker auxiliary working set in
    bytes (state lanes, scratch, block totals; inputs and outputs
    excluded).
    """

    merge_count: int = 0
    critical_depth: int = 0
    per_level_counts: list = field(default_factory=list)
    leaf_count: int = 0
    peak_extra_memory: int = 0
    n_paths: int = 0

    @property
    def merges_per_query(self):
        return self.merge_count / self.n_paths if self.n_paths else 0.0

    def _absorb(self, other):
        self.merge_count += other.merge_count
        self.critical_depth = max(self.critical_depth, other.critical_depth)
        if len(other.per_level_counts) > len(self.per_level_counts):
            self.per_level_counts += [0] * (len(other.per_level_counts) - len(self.per_level_counts))
        for i, c in enumerate(other.per_level_counts):
            self.per_level_counts[i] += c
        self.leaf_count += other.leaf_count
        self.peak_extra_memory = max(self.peak_extra_memory, other.peak_extra_memory)
        self.n_paths += other.n_paths

    def _bump_level(self, level, count):
        if level >= len(self.per_level_counts):
            self.per_level_counts += [0] * (level + 1 - len(self.per_level_counts))
        self.per_level_counts[level] += count
        self.merge_count += count


def leaf_state(q, k, v, scale):
    """Single-token summary ``(scale * <q, k>, 1, v)``."""
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.atleast_1d(np.asarray(v))
    if q.shape != k.shape or q.ndim != 1:
        raise ShapeError(f"q and k must be equal-length vectors, got {q.shape} and {k.shape}")
    dtype = np.result_type(q.dtype, k.dtype, v.dtype, np.float32)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    s = (q @ k) * dtype.type(scale)
    return StateTriple(s, dtype.type(1.0), v.astype(dtype, copy=False))


def _doubling_scan(src, dst, scratch, trace, level_base=0):
    """Level-synchronous doubling scan over the last lane axis.

    ``src``/``dst`` are ping-pong triples of views shaped (T, G, L) with W
    adding a trailing value axis; at level l, lane i combines with lane
    i - 2**l.  Returns the triple holding the final inclusive scan.
    """
    L = src[0].shape[2]
    d = 1
    level = level_base
    while d < L:
        sm, sS, sW = src
        dm, dS, dW = dst
        merge_lanes_into(
            sm[:, :, :-d], sS[:, :, :-d], sW[:, :, :-d],
            sm[:, :, d:], sS[:, :, d:], sW[:, :, d:],
            out=(dm[:, :, d:], dS[:, :, d:], dW[:, :, d:]),
            scratch=(scratch[0][:, :, d:], scratch[1][:, :, d:], scratch[2][:, :, d:]),
            guard_identity=False,
        )
        dm[:, :, :d] = sm[:, :, :d]
        dS[:, :, :d] = sS[:, :, :d]
        dW[:, :, :d] = sW[:, :, :d]
        if trace is not None:
            trace._bump_level(level, sm.shape[0] * sm.shape[1] * (L - d))
        src, dst = dst, src
        d <<= 1
        level += 1
    return src


def _upsweep(tm, tS, tW, trace, level_base):
    """In-place pairwise up-sweep over axis 1; lane count must be a power
    of two (callers pad with the identity).  Leaves each subtree's total
    at its rightmost position; the grand total lands in the last lane."""
    K_pad = tm.shape[1]
    levels = _ceil_log2(K_pad)
    for lvl in range(levels):
        stride = 2 << lvl
        half = 1 << lvl
        left = slice(half - 1, K_pad, stride)
        right = slice(stride - 1, K_pad, stride)
        mm, SS, WW = merge_lanes(
            tm[:, left], tS[:, left], tW[:, left],
            tm[:, right], tS[:, right], tW[:, right],
        )
        tm[:, right] = mm
        tS[:, right] = SS
        tW[:, right] = WW
        if trace is not None:
            trace._bump_level(level_base + lvl, tm.shape[0] * mm.shape[1])
    return levels


def _downsweep(tm, tS, tW, trace, level_base):
    """In-place pairwise down-sweep turning up-sweep totals into exclusive
    prefixes; seeds the root with the identity."""
    K_pad = tm.shape[1]
    levels = _ceil_log2(K_pad)
    tm[:, K_pad - 1] = -np.inf
    tS[:, K_pad - 1] = 0.0
    tW[:, K_pad - 1] = 0.0
    for lvl in reversed(range(levels)):
        stride = 2 << lvl
        half = 1 << lvl
        left = slice(half - 1, K_pad, stride)
        right = slice(stride - 1, K_pad, stride)
        left_m = tm[:, left].copy()
        left_S = tS[:, left].copy()
        left_W = tW[:, left].copy()
        tm[:, left] = tm[:, right]
        tS[:, left] = tS[:, right]
        tW[:, left] = tW[:, right]
        # running prefix first, then the left subtree it absorbs
        mm, SS, WW = merge_lanes(
            tm[:, right], tS[:, right], tW[:, right],
            left_m, left_S, left_W,
        )
        tm[:, right] = mm
        tS[:, right] = SS
        tW[:, right] = WW
        if trace is not None:
            trace._bump_level(level_base + (2 * levels - 1 - lvl), tm.shape[0] * mm.shape[1])
    return levels


def _stack_triples(items):
    items = list(items)
    widths = {t.d_v for t in items}
    if len(widths) != 1:
        raise ShapeError(f"mixed value widths {sorted(widths)}")
    dtype = items[0].dtype
    m = np.array([t.m for t in items], dtype=dtype)
    S = np.array([t.S for t in items], dtype=dtype)
    W = np.stack([t.W for t in items]).astype(dtype, copy=False)
    return m, S, W


def intra_block_scan(leaves):
    """Reduce one block of leaf summaries with the doubling schedule.

    Returns the block total (the last lane of the inclusive scan).
    """
    leaves = list(leaves)
    if not leaves:
        raise ShapeError("cannot scan an empty block")
    if any(t.is_identity() for t in leaves):
        raise ShapeError("leaf summaries must have finite anchors")
    m, S, W = _stack_triples(leaves)
    L = len(leaves)
    src = (m[None, None], S[None, None], W[None, None])
    dst = tuple(np.empty_like(a) for a in src)
    scr = (np.empty_like(src[0]), np.empty_like(src[0]), np.empty_like(src[2]))
    fm, fS, fW = _doubling_scan(src, dst, scr, None)
    return StateTriple(fm[0, 0, L - 1], fS[0, 0, L - 1], fW[0, 0, L - 1])


def inter_block_combine(block_totals, return_prefixes=False):
    """Two-pass combine of block totals.

    The up-sweep produces the full-sequence total (all the forward pass
    consumes); with ``return_prefixes=True`` the down-sweep also yields
    the exclusive prefix of every block, identity first.
    """
    totals = list(block_totals)
    if not totals:
        raise ShapeError("no block totals to combine")
    K = len(totals)
    d_v = totals[0].d_v
    dtype = totals[0].dtype
    K_pad = 1 << _ceil_log2(K)
    tm = np.full((1, K_pad), -np.inf, dtype=dtype)
    tS = np.zeros((1, K_pad), dtype=dtype)
    tW = np.zeros((1, K_pad, d_v), dtype=dtype)
    m, S, W = _stack_triples(totals)
    tm[0, :K] = m
    tS[0, :K] = S
    tW[0, :K] = W
    _upsweep(tm, tS, tW, None, 0)
    total = StateTriple(tm[0, K_pad - 1], tS[0, K_pad - 1], tW[0, K_pad - 1])
    if not return_prefixes:
        return total
    _downsweep(tm, tS, tW, None, 0)
    prefixes = []
    for i in range(K):
        if np.isneginf(tm[0, i]):
            prefixes.append(identity(d_v, Precision.from_dtype(dtype)))
        else:
            prefixes.append(StateTriple(tm[0, i], tS[0, i], tW[0, i]))
    return total, prefixes


def _tile_state_buffers(T, n, d_v, dtype):
    m0 = np.empty((T, n), dtype=dtype)
    m1 = np.empty((T, n), dtype=dtype)
    S0 = np.empty((T, n), dtype=dtype)
    S1 = np.empty((T, n), dtype=dtype)
    fa = np.empty((T, n), dtype=dtype)
    fb = np.empty((T, n), dtype=dtype)
    W0 = np.empty((T, n, d_v), dtype=dtype)
    W1 = np.empty((T, n, d_v), dtype=dtype)
    Wt = np.empty((T, n, d_v), dtype=dtype)
    bufs = dict(m=(m0, m1), S=(S0, S1), W=(W0, W1), f=(fa, fb), Wt=Wt)
    nbytes = sum(a.nbytes for a in (m0, m1, S0, S1, fa, fb, W0, W1, Wt))
    return bufs, nbytes


def _scan_tile_states(bufs, T, n, B, trace):
    """Run the intra-block doubling scan over all blocks of a tile at
    once.  State lanes live in bufs['m'][0], bufs['S'][0], bufs['W'][0]
    on entry.  Returns (totals_m, totals_S, totals_W) of shape (T, K...)."""
    K_full, r = divmod(n, B)
    finals = []  # (first_block, count, block_len, (m, S, W) final views)
    for start, g, length in ((0, K_full, B), (K_full * B, 1, r)):
        if g == 0 or length == 0:
            continue
        view = slice(start, start + g * length)
        src = tuple(bufs[key][0][:, view].reshape(T, g, length) for key in ("m", "S"))
        srcW = bufs["W"][0][:, view].reshape(T, g, length, -1)
        dst = tuple(bufs[key][1][:, view].reshape(T, g, length) for key in ("m", "S"))
        dstW = bufs["W"][1][:, view].reshape(T, g, length, -1)
        scr = (
            bufs["f"][0][:, view].reshape(T, g, length),
            bufs["f"][1][:, view].reshape(T, g, length),
            bufs["Wt"][:, view].reshape(T, g, length, -1),
        )
        fm, fS, fW = _doubling_scan((src[0], src[1], srcW), (dst[0], dst[1], dstW), scr, trace)
        finals.append((fm[:, :, length - 1], fS[:, :, length - 1], fW[:, :, length - 1]))
    tm = np.concatenate([f[0] for f in finals], axis=1)
    tS = np.concatenate([f[1] for f in finals], axis=1)
    tW = np.concatenate([f[2] for f in finals], axis=1)
    return tm, tS, tW


def _forward_tile(Qt, K, V, scale, B, trace):
    """One (tile of queries) x (all keys) forward pass.

    Returns the tile's outputs; combine counts and buffer bytes go into
    ``trace`` when given.
    """
    T, d = Qt.shape
    n, d_v = V.shape
    dtype = Qt.dtype
    bufs, aux_bytes = _tile_state_buffers(T, n, d_v, dtype)
    # leaf layer: anchors are the scaled logits, weights start at 1, the
    # value rows ride along unscaled
    m_leaf = bufs["m"][0]
    np.matmul(Qt, K.T, out=m_leaf)
    np.multiply(m_leaf, dtype.type(scale), out=m_leaf)
    bufs["S"][0][:] = 1.0
    np.copyto(bufs["W"][0], V[None, :, :])
    if trace is not None:
        trace.leaf_count += T * n
        trace.n_paths += T
    intra_levels = _ceil_log2(min(B, n))
    tm, tS, tW = _scan_tile_states(bufs, T, n, B, trace)
    K_blocks = tm.shape[1]
    K_pad = 1 << _ceil_log2(K_blocks)
    pm = np.full((T, K_pad), -np.inf, dtype=dtype)
    pS = np.zeros((T, K_pad), dtype=dtype)
    pW = np.zeros((T, K_pad, d_v), dtype=dtype)
    pm[:, :K_blocks] = tm
    pS[:, :K_blocks] = tS
    pW[:, :K_blocks] = tW
    aux_bytes += tm.nbytes + tS.nbytes + tW.nbytes
    aux_bytes += 2 * (pm.nbytes + pS.nbytes + pW.nbytes)  # tree + level temporaries
    inter_levels = _upsweep(pm, pS, pW, trace, intra_levels)
    root_S = pS[:, K_pad - 1]
    root_W = pW[:, K_pad - 1]
    if not np.all(np.isfinite(root_S)) or np.any(root_S <= 0):
        raise NumericalError("scan normalizer is zero or non-finite; inputs are corrupted")
    if trace is not None:
        trace.critical_depth = max(trace.critical_depth, intra_levels + inter_levels)
        trace.peak_extra_memory = max(trace.peak_extra_memory, aux_bytes)
    return root_W / root_S[:, None]


def scan_forward(problem, cfg):
    """Blocked-scan attention over every (batch, head, query).

    Returns ``(output, trace)``; ``trace`` is None unless ``cfg.trace``.
    Output bytes are identical for every ``cfg.workers`` value because the
    reduction tree depends only on ``(n, block_size)``.
    """
    if not isinstance(cfg, ScanConfig):
        raise ShapeError("cfg must be a ScanConfig")
    dtype = cfg.precision.dtype
    Q = problem.Q.data.astype(dtype, copy=False)
    K = problem.K.data.astype(dtype, copy=False)
    V = problem.V.data.astype(dtype, copy=False)
    b, h, n, d = Q.shape
    d_v = V.shape[3]
    scale = problem.scale
    Y = np.empty((b, h, n, d_v), dtype=dtype)
    tasks = []
    for bi in range(b):
        for hi in range(h):
            for q0 in range(0, n, cfg.tile_q):
                tasks.append((bi, hi, q0, min(q0 + cfg.tile_q, n)))

    def run(task):
        bi, hi, q0, q1 = task
        local = ScanTrace() if cfg.trace else None
        Y[bi, hi, q0:q1] = _forward_tile(
            Q[bi, hi, q0:q1], K[bi, hi], V[bi, hi], scale, cfg.block_size, local
        )
        return local

    workers = cfg.resolved_workers()
    if workers == 1 or len(tasks) == 1:
        locals_ = [run(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            locals_ = list(pool.map(run, tasks))
    trace = None
    if cfg.trace:
        trace = ScanTrace()
        for loc in locals_:
            trace._absorb(loc)
    return AttentionOutput(Tensor4(Y, cfg.precision)), trace


def blockwise_states(problem, cfg, query_index, b_idx=0, h_idx=0, block_size=None):
    """Per-block totals for a single query, for external composition
    checks.  ``block_size`` overrides ``cfg.block_size`` so a validation
    harness can sweep partitions."""
    B = cfg.block_size if block_size is None else int(block_size)
    if B < 1:
        raise ShapeError(f"block size must be >= 1, got {B}")
    b, h, n, d, d_v = problem.dims
    if not (0 <= query_index < n):
        raise ShapeError(f"query index {query_index} out of range [0, {n})")
    dtype = cfg.precision.dtype
    q = problem.Q.data[b_idx, h_idx, query_index].astype(dtype, copy=False)
    K = problem.K.data[b_idx, h_idx].astype(dtype, copy=False)
    V = problem.V.data[b_idx, h_idx].astype(dtype, copy=False)
    bufs, _ = _tile_state_buffers(1, n, d_v, dtype)
    m_leaf = bufs["m"][0]
    np.matmul(q[None], K.T, out=m_leaf)
    np.multiply(m_leaf, dtype.type(problem.scale), out=m_leaf)
    bufs["S"][0][:] = 1.0
    np.copyto(bufs["W"][0], V[None, :, :])
    tm, tS, tW = _scan_tile_states(bufs, 1, n, B, None)
    return [StateTriple(tm[0, i], tS[0, i], tW[0, i]) for i in range(tm.shape[1])]
