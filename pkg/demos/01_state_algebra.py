"""The state algebra behind single-pass softmax attention.

A contiguous stretch of tokens is summarized by (m, S, W): the largest
logit seen, the normalizer rescaled by exp(-m), and the value-weighted
sum under the same rescaling.  Summaries of adjacent stretches combine
with `merge`, and because that operator is associative with identity
(-inf, 0, 0), any tree of merges gives the same answer as a left-to-right
fold.  That is the whole trick this library is built on.
"""

import functools

import numpy as np

from scanattn import StateTriple, identity, merge, merge_tree, renormalize, unnormalize

rng = np.random.default_rng(0)

# --- a single token becomes a triple -------------------------------------
# logit s, weight exp(s - s) = 1, the raw value vector
t1 = StateTriple(0.3, 1.0, np.array([1.0, -1.0]))
t2 = StateTriple(1.7, 1.0, np.array([0.5, 2.0]))
print("token summaries:")
print("  t1 =", (float(t1.m), float(t1.S), t1.W))
print("  t2 =", (float(t2.m), float(t2.S), t2.W))

# --- merging re-anchors the smaller side ----------------------------------
both = merge(t1, t2)
print("\nmerged:", (float(both.m), float(both.S), both.W))
print("softmax output so far:", both.W / both.S)

# check against the direct two-token softmax
logits = np.array([0.3, 1.7])
w = np.exp(logits - logits.max())
direct = (w[:, None] * np.array([[1.0, -1.0], [0.5, 2.0]])).sum(0) / w.sum()
print("direct softmax:       ", direct)

# --- identity and the un/renorm pair --------------------------------------
e = identity(2)
assert merge(e, both).S == both.S and merge(both, e).S == both.S
m, S_raw, W_raw = unnormalize(both)
print("\nraw sums (before re-anchoring):", float(S_raw), W_raw)
back = renormalize(m, S_raw, W_raw)
print("re-anchored again:", float(back.S), back.W)

# --- associativity in bulk -------------------------------------------------
ts = [StateTriple(rng.uniform(-20, 20), rng.uniform(0, 5), rng.standard_normal(2))
      for _ in range(64)]
fold = functools.reduce(merge, ts)
tree = merge_tree(ts)
print("\n64 random summaries, fold vs balanced tree:")
print("  S: fold", float(fold.S), " tree", float(tree.S))
print("  max |W fold - W tree| =", np.abs(fold.W - tree.W).max())
