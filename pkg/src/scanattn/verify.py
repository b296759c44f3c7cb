"""Numerical-equivalence harness.

Three instruments, mirroring how the scan is validated end to end:

* :func:`drift_metrics` — six discrepancy measures between a candidate
  attention output and a reference (max-abs and relative-L2 on both P and
  Y, mean Jensen-Shannon divergence of attention rows, and the argmax
  disagreement rate), each with nearest-rank percentiles over per-row
  samples.
* :func:`block_validation` — composes per-block summaries under several
  partitions of the key axis and checks every reduction agrees with the
  sequential fold (the block-composition property made executable).
* :func:`bound_check` — runs the FP32 scan against the FP64 reference
  and asserts every output row's relative L2 error stays within
  ``u * depth * slack``.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import blockwise_states, scan_depth, scan_forward
from .errors import NumericalError, ShapeError
from .monoid import Precision, merge
from .oracles import naive_attention, sequential_state

__all__ = [
    "DriftReport",
    "drift_metrics",
    "BlockValidationReport",
    "block_validation",
    "BoundCheckReport",
    "bound_check",
    "nearest_rank_percentiles",
    "FP64_TIER_P95",
    "DEFAULT_SLACK",
]

# FP64-vs-FP64 comparisons must sit at this level or below (p95 per metric);
# the FP32 tier is gated by the depth bound instead.
FP64_TIER_P95 = 1e-13
# Converts the asymptotic row bound u*L into a runnable threshold; covers
# dot-product rounding and the exp-accuracy constant.
DEFAULT_SLACK = 8.0

METRIC_NAMES = ("max_abs_P", "rel_l2_P", "js_mean", "arg_rate", "max_abs_Y", "rel_l2_Y")


def nearest_rank_percentiles(samples):
    """Median/p95/p99 by the nearest-rank rule (no interpolation, so the
    values are reproducible across platforms)."""
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if s.size == 0:
        return {"median": 0.0, "p95": 0.0, "p99": 0.0}

    def rank(p):
        return s[max(math.ceil(p / 100.0 * s.size), 1) - 1]

    return {"median": float(rank(50)), "p95": float(rank(95)), "p99": float(rank(99))}


@dataclass
class DriftReport:
    """The six drift metrics plus per-row percentile spreads."""

    max_abs_P: float | None
    rel_l2_P: float | None
    js_mean: float | None
    arg_rate: float | None
    max_abs_Y: float
    rel_l2_Y: float
    percentiles: dict = field(default_factory=dict)
    scenario: str = ""
    dims: tuple = ()
    candidate_precision: str = ""
    reference_precision: str = ""
    p_source: str = "absent"

    def metrics(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self):
        out = dict(self.metrics())
        out["percentiles"] = self.percentiles
        out["scenario"] = self.scenario
        out["dims"] = list(self.dims)
        out["candidate_precision"] = self.candidate_precision
        out["reference_precision"] = self.reference_precision
        out["p_source"] = self.p_source
        return out

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    CSV_FIELDS = (
        "scenario", "dims", "candidate_precision", "reference_precision", "p_source",
        *METRIC_NAMES,
        *(f"{m}_{p}" for m in METRIC_NAMES for p in ("median", "p95", "p99")),
    )

    @classmethod
    def csv_header(cls):
        return ",".join(cls.CSV_FIELDS)

    def csv_row(self):
        vals = {
            "scenario": self.scenario,
            "dims": "x".join(str(d) for d in self.dims),
            "candidate_precision": self.candidate_precision,
            "reference_precision": self.reference_precision,
            "p_source": self.p_source,
        }
        for name in METRIC_NAMES:
            v = getattr(self, name)
            vals[name] = "" if v is None else repr(float(v))
            pct = self.percentiles.get(name)
            for p in ("median", "p95", "p99"):
                vals[f"{name}_{p}"] = "" if pct is None else repr(float(pct[p]))
        return ",".join(vals[f] for f in self.CSV_FIELDS)


def _row_js(p_rows, q_rows):
    """Jensen-Shannon divergence per row, natural log, rows renormalized,
    zero-probability terms contributing zero."""
    p = p_rows / p_rows.sum(axis=-1, keepdims=True)
    q = q_rows / q_rows.sum(axis=-1, keepdims=True)
    mid = 0.5 * (p + q)

    def half_kl(a):
        with np.errstate(divide="ignore", invalid="ignore"):
            term = a * np.log(a / mid)
        return np.where(a > 0, term, 0.0).sum(axis=-1)

    return 0.5 * half_kl(p) + 0.5 * half_kl(q)


def drift_metrics(candidate, reference, scenario="", p_source=None):
    """Measure candidate-vs-reference drift.

    P-based metrics are computed when both sides carry probabilities
    (``p_source`` labels where the candidate's came from, e.g.
    "recomputed" when the scan path never materialized them).  Headline
    norms are over the full tensors; the percentile spreads are over
    per-(batch, head, row) samples.
    """
    cy = candidate.Y.data.astype(np.float64, copy=False)
    ry = reference.Y.data.astype(np.float64, copy=False)
    if cy.shape != ry.shape:
        raise ShapeError(f"output shapes differ: {cy.shape} vs {ry.shape}")
    tiny = np.finfo(np.float64).tiny
    # one sample per (batch, head, row)
    dY_rows = (cy - ry).reshape(-1, cy.shape[2], cy.shape[3])
    ref_rows = ry.reshape(-1, ry.shape[2], ry.shape[3])
    samp_max_abs_Y = np.abs(dY_rows).max(axis=2).ravel()
    samp_rel_l2_Y = (
        np.linalg.norm(dY_rows, axis=2)
        / np.maximum(np.linalg.norm(ref_rows, axis=2), tiny)
    ).ravel()
    max_abs_Y = float(np.abs(dY_rows).max()) if dY_rows.size else 0.0
    rel_l2_Y = float(np.linalg.norm(dY_rows) / max(np.linalg.norm(ref_rows), tiny))

    percentiles = {
        "max_abs_Y": nearest_rank_percentiles(samp_max_abs_Y),
        "rel_l2_Y": nearest_rank_percentiles(samp_rel_l2_Y),
    }

    have_p = candidate.P is not None and reference.P is not None
    max_abs_P = rel_l2_P = js_mean = arg_rate = None
    if have_p:
        cp = candidate.P.data.astype(np.float64, copy=False)
        rp = reference.P.data.astype(np.float64, copy=False)
        if cp.shape != rp.shape:
            raise ShapeError(f"probability shapes differ: {cp.shape} vs {rp.shape}")
        rp_rows = rp.reshape(-1, rp.shape[2], rp.shape[3])
        cp_rows = cp.reshape(-1, cp.shape[2], cp.shape[3])
        if np.any(rp_rows.sum(axis=2) <= 0):
            raise NumericalError("reference probability rows are not normalizable")
        dP = cp_rows - rp_rows
        samp_max_abs_P = np.abs(dP).max(axis=2).ravel()
        samp_rel_l2_P = (
            np.linalg.norm(dP, axis=2)
            / np.maximum(np.linalg.norm(rp_rows, axis=2), tiny)
        ).ravel()
        samp_js = _row_js(cp_rows, rp_rows).ravel()
        samp_arg = (cp_rows.argmax(axis=2) != rp_rows.argmax(axis=2)).astype(np.float64).ravel()
        max_abs_P = float(np.abs(dP).max()) if dP.size else 0.0
        rel_l2_P = float(np.linalg.norm(dP) / max(np.linalg.norm(rp_rows), tiny))
        js_mean = float(samp_js.mean())
        arg_rate = float(samp_arg.mean())
        percentiles.update({
            "max_abs_P": nearest_rank_percentiles(samp_max_abs_P),
            "rel_l2_P": nearest_rank_percentiles(samp_rel_l2_P),
            "js_mean": nearest_rank_percentiles(samp_js),
            "arg_rate": nearest_rank_percentiles(samp_arg),
        })

    return DriftReport(
        max_abs_P=max_abs_P,
        rel_l2_P=rel_l2_P,
        js_mean=js_mean,
        arg_rate=arg_rate,
        max_abs_Y=max_abs_Y,
        rel_l2_Y=rel_l2_Y,
        percentiles=percentiles,
        scenario=scenario,
        dims=tuple(candidate.Y.dims),
        candidate_precision=candidate.precision.value,
        reference_precision=reference.precision.value,
        p_source=(p_source or ("oracle" if have_p else "absent")),
    )


def _triple_rel_dev(t1, t2):
    tiny = np.finfo(np.float64).tiny
    parts_1 = np.concatenate([[float(t1.m)], [float(t1.S)], np.asarray(t1.W, dtype=np.float64),
                              np.asarray(t1.W, dtype=np.float64) / max(float(t1.S), tiny)])
    parts_2 = np.concatenate([[float(t2.m)], [float(t2.S)], np.asarray(t2.W, dtype=np.float64),
                              np.asarray(t2.W, dtype=np.float64) / max(float(t2.S), tiny)])
    denom = np.maximum(np.maximum(np.abs(parts_1), np.abs(parts_2)), tiny)
    return float(np.max(np.abs(parts_1 - parts_2) / denom))


@dataclass
class BlockValidationReport:
    partitions: list
    query_points: list
    max_pairwise_dev: float
    max_vs_sequential_dev: float
    per_partition_dev: dict

    def passed(self, tol):
        return self.max_pairwise_dev <= tol and self.max_vs_sequential_dev <= tol

    def to_dict(self):
        return {
            "partitions": list(self.partitions),
            "query_points": [list(q) for q in self.query_points],
            "max_pairwise_dev": self.max_pairwise_dev,
            "max_vs_sequential_dev": self.max_vs_sequential_dev,
            "per_partition_dev": {str(k): v for k, v in self.per_partition_dev.items()},
        }


def block_validation(problem, cfg, partitions, query_indices=None):
    """Check block composition: reduce per-block summaries under each
    partition size and compare every total against every other and
    against the sequential per-query fold."""
    partitions = [int(p) for p in partitions]
    if any(p < 1 for p in partitions):
        raise ShapeError("partition block sizes must be >= 1")
    b, h, n, d, d_v = problem.dims
    if query_indices is None:
        query_indices = sorted({0, n // 3, (2 * n) // 3, n - 1})
    heads = sorted({(0, 0), (b - 1, h - 1)})
    points = [(bi, hi, qi) for (bi, hi) in heads for qi in query_indices]
    max_pair = 0.0
    max_seq = 0.0
    per_partition = {p: 0.0 for p in partitions}
    for bi, hi, qi in points:
        totals = []
        for p in partitions:
            states = blockwise_states(problem, cfg, qi, b_idx=bi, h_idx=hi, block_size=p)
            totals.append(functools.reduce(merge, states))
        seq = sequential_state(problem, cfg.precision, bi, hi, qi)
        for i, t1 in enumerate(totals):
            dev = _triple_rel_dev(t1, seq)
            max_seq = max(max_seq, dev)
            per_partition[partitions[i]] = max(per_partition[partitions[i]], dev)
            for t2 in totals[i + 1:]:
                max_pair = max(max_pair, _triple_rel_dev(t1, t2))
    return BlockValidationReport(
        partitions=partitions,
        query_points=points,
        max_pairwise_dev=max_pair,
        max_vs_sequential_dev=max_seq,
        per_partition_dev=per_partition,
    )


@dataclass
class BoundCheckReport:
    """Per-row relative-L2 errors of the FP32 scan against the FP64
    reference, judged against u * depth * slack."""

    n: int
    block_size: int
    depth: int
    unit_roundoff: float
    bound: float
    slack: float
    threshold: float
    rows_total: int
    rows_failed: int
    max_row_error: float
    row_error_percentiles: dict
    passed: bool

    def to_dict(self):
        return {
            "n": self.n,
            "block_size": self.block_size,
            "depth": self.depth,
            "unit_roundoff": self.unit_roundoff,
            "bound": self.bound,
            "slack": self.slack,
            "threshold": self.threshold,
            "rows_total": self.rows_total,
            "rows_failed": self.rows_failed,
            "max_row_error": self.max_row_error,
            "row_error_percentiles": self.row_error_percentiles,
            "passed": self.passed,
        }


def bound_check(problem, cfg, slack=DEFAULT_SLACK, candidate=None, reference=None):
    """Run the FP32 scan and the FP64 reference, and test every output
    row against the depth bound.

    ``candidate``/``reference`` accept already-computed outputs so a
    caller holding them (e.g. a traced run) does not pay for the
    pipelines twice; when omitted both are computed here.
    """
    if cfg.precision is not Precision.FP32:
        raise ShapeError("bound_check requires an FP32 scan configuration")
    b, h, n, d, d_v = problem.dims
    if candidate is None:
        candidate, _ = scan_forward(problem, cfg)
    if reference is None:
        reference = naive_attention(problem, precision=Precision.FP64)
    cy = candidate.Y.data.astype(np.float64)
    ry = reference.Y.data
    tiny = np.finfo(np.float64).tiny
    err = np.linalg.norm(cy - ry, axis=3) / np.maximum(np.linalg.norm(ry, axis=3), tiny)
    err = err.ravel()
    u = Precision.FP32.unit_roundoff
    depth = scan_depth(n, cfg.block_size)
    bound = u * depth
    threshold = bound * slack
    failed = int(np.sum(err > threshold))
    return BoundCheckReport(
        n=n,
        block_size=cfg.block_size,
        depth=depth,
        unit_roundoff=u,
        bound=bound,
        slack=slack,
        threshold=threshold,
        rows_total=int(err.size),
        rows_failed=failed,
        max_row_error=float(err.max()),
        row_error_percentiles=nearest_rank_percentiles(err),
        passed=failed == 0,
    )
