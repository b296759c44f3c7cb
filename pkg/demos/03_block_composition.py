"""Any partition of the keys gives the same answer.

Split one query's keys into contiguous blocks of any size, summarize
each block independently, combine the summaries in order, and the result
matches the token-by-token sequential fold.  This is the property that
lets blocks be computed in parallel and merged in a tree.
"""

import functools

import numpy as np

from scanattn import (
    GeneratorSpec,
    Precision,
    ScanConfig,
    block_validation,
    blockwise_states,
    generate,
    merge,
    sequential_state,
)

n = 1024
problem = generate(GeneratorSpec(seed=21, scenario="regular", b=1, h=1,
                                 n=n, d=32, d_v=32))
cfg = ScanConfig()
query = 17

seq = sequential_state(problem, Precision.FP64, 0, 0, query)
print(f"sequential final state for query {query}: m={float(seq.m):.6f} "
      f"S={float(seq.S):.6f}")

print("\nblock size -> composed total (S component) and deviation:")
for bs in (1, 2, 16, 128, n):
    states = blockwise_states(problem, cfg, query, block_size=bs)
    total = functools.reduce(merge, states)
    dev = abs(float(total.S) - float(seq.S)) / float(seq.S)
    print(f"  {bs:5d} blocks of {len(states):4d}: S={float(total.S):.12f}  "
          f"rel dev {dev:.2e}")

report = block_validation(problem, cfg, [1, 2, 16, 128, n])
print("\nfull sweep over sampled queries:")
print("  worst pairwise deviation   :", report.max_pairwise_dev)
print("  worst vs sequential        :", report.max_vs_sequential_dev)
print("  agrees within 1e-12        :", report.passed(1e-12))

# the exclusive prefixes from the two-pass combine are the running
# "attention so far" states, one per block
from scanattn import inter_block_combine

states = blockwise_states(problem, cfg, query, block_size=128)
total, prefixes = inter_block_combine(states, return_prefixes=True)
print("\nexclusive prefixes (first is the empty-range identity):")
for i, pre in enumerate(prefixes[:4]):
    tag = "identity" if pre.is_identity() else f"S={float(pre.S):.6f}"
    print(f"  before block {i}: {tag}")
