"""Latency measurement, operation counting, and the scaling fit.

Wall-clock numbers here are for trend fitting only; the acceptance-grade
quantities are the hardware-independent ones (combine counts, leaf
counts, auxiliary memory).  Latency is fitted to

    T(n) ~= a * depth(n, B) + b * n**2 + c

which separates the logarithmic critical path from the quadratic total
work.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import ScanConfig, scan_depth, scan_forward
from .errors import MemoryCapExceeded, ShapeError
from .monoid import Precision
from .oracles import naive_attention, naive_aux_bytes, sequential_aux_bytes, sequential_scan
from .tensorio import generate
from .verify import nearest_rank_percentiles

__all__ = [
    "BenchRecord",
    "ScalingFit",
    "run_bench",
    "fit_scaling",
    "emit_report",
    "DEFAULT_MEM_CAP",
]

DEFAULT_MEM_CAP = 4 << 30  # 4 GiB of auxiliary state
MODES = ("naive", "seq", "scan")


@dataclass
class BenchRecord:
    """One benchmarked workload.

    Summary statistics (median/p5/p95) are derived at serialization time,
    never stored.  A workload whose auxiliary allocation would exceed the
    memory cap is recorded with ``status="oom"`` and empty latencies
    instead of crashing.
    """

    mode: str
    n: int
    block_size: int
    tile_q: int
    d: int
    d_v: int
    b: int
    h: int
    precision: str
    repeats: int
    warmup: int
    latencies: list = field(default_factory=list)
    merge_count: int = 0
    leaf_count: int = 0
    peak_extra_memory: int = 0
    status: str = "ok"
    error: str = ""

    def summary(self):
        if not self.latencies:
            return {"median": None, "p5": None, "p95": None}
        s = np.sort(np.asarray(self.latencies))
        pct = nearest_rank_percentiles(s)
        idx5 = max(int(np.ceil(0.05 * s.size)), 1) - 1
        return {"median": float(pct["median"]), "p5": float(s[idx5]), "p95": float(pct["p95"])}

    def to_dict(self):
        out = {
            "mode": self.mode, "n": self.n, "block_size": self.block_size,
            "tile_q": self.tile_q, "d": self.d, "d_v": self.d_v,
            "b": self.b, "h": self.h, "precision": self.precision,
            "repeats": self.repeats, "warmup": self.warmup,
            "latencies": [float(x) for x in self.latencies],
            "merge_count": self.merge_count, "leaf_count": self.leaf_count,
            "peak_extra_memory": self.peak_extra_memory,
            "status": self.status, "error": self.error,
        }
        out.update({f"latency_{k}": v for k, v in self.summary().items()})
        return out

    CSV_FIELDS = (
        "mode", "n", "block_size", "tile_q", "d", "d_v", "b", "h", "precision",
        "repeats", "warmup", "status", "latency_median", "latency_p5", "latency_p95",
        "merge_count", "leaf_count", "peak_extra_memory",
    )

    @classmethod
    def csv_header(cls):
        return ",".join(cls.CSV_FIELDS)

    def csv_row(self):
        d = self.to_dict()
        cells = []
        for f in self.CSV_FIELDS:
            v = d[f]
            cells.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        return ",".join(cells)


@dataclass
class ScalingFit:
    """Least-squares coefficients of a*depth(n,B) + b*n^2 + c with the
    relative RMS residual always reported alongside."""

    a: float
    b: float
    c: float
    residual: float
    block_size: int
    points: list

    def predict(self, n):
        return self.a * scan_depth(int(n), self.block_size) + self.b * float(n) ** 2 + self.c

    def to_dict(self):
        return {
            "a": self.a, "b": self.b, "c": self.c,
            "residual": self.residual, "block_size": self.block_size,
            "points": [[int(n), float(t)] for n, t in self.points],
        }


def run_bench(spec, cfg, mode, repeats, warmup=1, mem_cap_bytes=DEFAULT_MEM_CAP):
    """Time one deterministic workload.

    Warmup runs are excluded from the recorded latencies (their count is
    kept in the record); the scan mode attaches combine/leaf counts from
    its trace.
    """
    if mode not in MODES:
        raise ShapeError(f"unknown bench mode {mode!r}; use one of {MODES}")
    if repeats < 3:
        raise ShapeError(f"repeats must be >= 3, got {repeats}")
    problem = generate(spec)
    itemsize = np.dtype(cfg.precision.dtype).itemsize
    record = BenchRecord(
        mode=mode, n=spec.n, block_size=cfg.block_size, tile_q=cfg.tile_q,
        d=spec.d, d_v=spec.d_v, b=spec.b, h=spec.h,
        precision=cfg.precision.value, repeats=repeats, warmup=warmup,
    )

    trace_box = {}

    def work():
        if mode == "naive":
            naive_attention(problem, cfg.precision, materialize_P=False,
                            mem_cap_bytes=mem_cap_bytes)
        elif mode == "seq":
            sequential_scan(problem, cfg.precision)
        else:
            traced_cfg = ScanConfig(
                block_size=cfg.block_size, tile_q=cfg.tile_q, workers=cfg.workers,
                precision=cfg.precision, trace=True,
            )
            _, trace_box["trace"] = scan_forward(problem, traced_cfg)

    try:
        for _ in range(warmup):
            work()
        for _ in range(repeats):
            t0 = time.perf_counter()
            work()
            record.latencies.append(time.perf_counter() - t0)
    except MemoryCapExceeded as exc:
        record.status = "oom"
        record.error = str(exc)
        record.latencies = []
        record.peak_extra_memory = exc.requested_bytes
        return record

    if mode == "naive":
        record.peak_extra_memory = naive_aux_bytes(spec.n, itemsize)
    elif mode == "seq":
        record.peak_extra_memory = sequential_aux_bytes(spec.n, spec.d_v, itemsize)
    else:
        trace = trace_box["trace"]
        record.merge_count = trace.merge_count
        record.leaf_count = trace.leaf_count
        record.peak_extra_memory = trace.peak_extra_memory
    return record


def fit_scaling(points, block_size):
    """Ordinary least squares of latency against [depth(n,B), n^2, 1].

    Needs at least 3 distinct n (the rank of the design); 4+ make the
    residual meaningful.  Columns are normalized before the solve so
    exact synthetic data is recovered to machine accuracy.
    """
    pts = [(int(n), float(t)) for n, t in points]
    ns = np.array([p[0] for p in pts], dtype=np.float64)
    ts = np.array([p[1] for p in pts], dtype=np.float64)
    if len(set(ns.tolist())) < 3:
        raise ShapeError("need at least 3 points with distinct n to fit 3 coefficients")
    design = np.stack([
        np.array([scan_depth(int(n), block_size) for n in ns], dtype=np.float64),
        ns ** 2,
        np.ones_like(ns),
    ], axis=1)
    norms = np.linalg.norm(design, axis=0)
    coef, *_ = np.linalg.lstsq(design / norms, ts, rcond=None)
    coef = coef / norms
    pred = design @ coef
    denom = max(float(np.linalg.norm(ts)), np.finfo(np.float64).tiny)
    residual = float(np.linalg.norm(pred - ts) / denom)
    return ScalingFit(
        a=float(coef[0]), b=float(coef[1]), c=float(coef[2]),
        residual=residual, block_size=block_size, points=pts,
    )


def emit_report(records, fits, json_path, csv_path=None):
    """Write the full JSON report and a flat CSV next to it.

    JSON floats serialize via repr, so a re-read reproduces every numeric
    field bit-for-bit.
    """
    doc = {
        "schema": "scanattn-bench-v1",
        "records": [r.to_dict() for r in records],
        "fits": [f.to_dict() for f in fits],
    }
    with open(json_path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    if csv_path is None:
        csv_path = str(json_path).rsplit(".", 1)[0] + ".csv"
    with open(csv_path, "w") as f:
        f.write(BenchRecord.csv_header() + "\n")
        for r in records:
            f.write(r.csv_row() + "\n")
    return json_path, csv_path
