"""Work, memory, and the latency scaling fit.

Total arithmetic stays quadratic in n (every query still meets every
key), but auxiliary memory is linear and the critical path logarithmic.
The bench layer records all three, and fits latency to
a * L(n, B) + b * n^2 + c to separate the depth term from the work term.
"""

from scanattn import GeneratorSpec, Precision, ScanConfig, fit_scaling, run_bench

cfg = ScanConfig(block_size=128, precision=Precision.FP32)


def spec(n):
    return GeneratorSpec(seed=41, scenario="regular", b=1, h=1, n=n,
                         d=8, d_v=8, precision=Precision.FP32)


print("n, per-query combines, leaf states, aux KiB, median latency")
records = []
for n in (512, 1024, 2048, 4096):
    rec = run_bench(spec(n), cfg, "scan", repeats=3)
    records.append(rec)
    print(f"  {n:5d}  {rec.merge_count // n:7d}  {rec.leaf_count:9d}  "
          f"{rec.peak_extra_memory // 1024:7d}  {rec.summary()['median']:.4f}s")

print("\ndoubling n doubles combines per query and quadruples leaf work:")
for a, b in zip(records, records[1:]):
    print(f"  {a.n}->{b.n}: combines x{(b.merge_count / b.n) / (a.merge_count / a.n):.3f}, "
          f"leaves x{b.leaf_count / a.leaf_count:.2f}, "
          f"aux x{b.peak_extra_memory / a.peak_extra_memory:.2f}")

# naive mode hits the auxiliary-memory cap instead of crashing
oom = run_bench(spec(65536), cfg, "naive", repeats=3, mem_cap_bytes=1 << 30)
print(f"\nnaive at n=65536 under a 1 GiB cap: status={oom.status} ({oom.error})")

pts = [(r.n, r.summary()["median"]) for r in records]
fit = fit_scaling(pts, cfg.block_size)
print(f"\nlatency fit T(n) ~ a*L + b*n^2 + c: a={fit.a:.4g} b={fit.b:.4g} "
      f"c={fit.c:.4g} residual={fit.residual:.3f}")
for n, t in pts:
    print(f"  n={n:5d}: measured {t:.4f}s  predicted {fit.predict(n):.4f}s")
