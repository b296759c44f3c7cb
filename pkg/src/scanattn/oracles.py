"""Reference attention computations used as ground truth.

Three routes to the same answer, in decreasing memory appetite:

* :func:`naive_attention` materializes the score matrix one (batch, head)
  slice at a time, with row-max subtraction so even the float64 reference
  never overflows.
* :func:`vectorized_oracle` is the batched equivalence-check pipeline
  (scores, row max, exp, row sums, probabilities, outputs) and always
  returns the probability matrix.
* :func:`sequential_scan` streams keys token by token per query with the
  two-branch running-max update and never allocates the n-by-n matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MemoryCapExceeded, NumericalError, ShapeError
from .monoid import Precision, StateTriple
from .tensorio import Tensor4

__all__ = [
    "AttentionOutput",
    "naive_attention",
    "vectorized_oracle",
    "sequential_scan",
    "sequential_state",
    "naive_aux_bytes",
    "sequential_aux_bytes",
]


@dataclass
class AttentionOutput:
    """Attention result: outputs always, probabilities on request."""

    Y: Tensor4
    P: Tensor4 | None = None

    @property
    def precision(self):
        return self.Y.precision


def _as_dtype(problem, precision):
    precision = problem.precision if precision is None else precision
    dtype = precision.dtype
    Q = problem.Q.data.astype(dtype, copy=False)
    K = problem.K.data.astype(dtype, copy=False)
    V = problem.V.data.astype(dtype, copy=False)
    return Q, K, V, dtype.type(problem.scale), precision


def naive_aux_bytes(n, itemsize):
    """Auxiliary working set of one naive (batch, head) slice: the n-by-n
    score/exp buffer plus per-row max and sum vectors."""
    return n * n * itemsize + 2 * n * itemsize


def sequential_aux_bytes(n, d_v, itemsize):
    """Auxiliary state of the streaming scan over one (batch, head) slice:
    running (m, S, W) lanes for every query plus one score column."""
    return n * (2 + d_v) * itemsize + n * itemsize


def _check_normalizer(s):
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise NumericalError("softmax normalizer is zero or non-finite; inputs are corrupted")


def naive_attention(problem, precision=None, materialize_P=False, mem_cap_bytes=None):
    """Exact softmax attention with the score matrix materialized.

    Serves as the float64 reference when ``precision=Precision.FP64``.
    ``mem_cap_bytes`` converts an oversized n-by-n allocation into
    :class:`MemoryCapExceeded` before any memory is touched.
    """
    Q, K, V, scale, precision = _as_dtype(problem, precision)
    b, h, n, d = Q.shape
    d_v = V.shape[3]
    itemsize = np.dtype(precision.dtype).itemsize
    aux = naive_aux_bytes(n, itemsize)
    if mem_cap_bytes is not None and aux > mem_cap_bytes:
        raise MemoryCapExceeded(aux, mem_cap_bytes, f"naive n={n} score matrix")
    Y = np.empty((b, h, n, d_v), dtype=precision.dtype)
    P = np.empty((b, h, n, n), dtype=precision.dtype) if materialize_P else None
    for bi in range(b):
        for hi in range(h):
            scores = (Q[bi, hi] @ K[bi, hi].T) * scale
            m = scores.max(axis=1, keepdims=True)
            np.subtract(scores, m, out=scores)
            np.exp(scores, out=scores)
            s = scores.sum(axis=1, keepdims=True)
            _check_normalizer(s)
            Y[bi, hi] = (scores @ V[bi, hi]) / s
            if materialize_P:
                P[bi, hi] = scores / s
    return AttentionOutput(
        Tensor4(Y, precision),
        Tensor4(P, precision) if materialize_P else None,
    )


def vectorized_oracle(problem, precision=None):
    """Batched verification pipeline; probabilities always materialized.

    Computes scores QK^T/sqrt(d), per-row max, exponentials of the shifted
    scores, row sums, then probabilities and outputs by row-wise division.
    """
    Q, K, V, scale, precision = _as_dtype(problem, precision)
    scores = np.matmul(Q, K.transpose(0, 1, 3, 2)) * scale
    m = scores.max(axis=-1, keepdims=True)
    np.subtract(scores, m, out=scores)
    np.exp(scores, out=scores)
    s = scores.sum(axis=-1, keepdims=True)
    _check_normalizer(s)
    Y = np.matmul(scores, V) / s
    np.divide(scores, s, out=scores)
    return AttentionOutput(Tensor4(Y, precision), Tensor4(scores, precision))


def sequential_scan(problem, precision=None, validate_exponents=False):
    """Per-query streaming attention via the running-max recurrence.

    Every query starts from ``(-inf, 0, 0)`` and folds one token at a
    time: if the running max survives, the new token's weight is
    ``exp(s_j - m)``; otherwise all past sums rescale by
    ``exp(m_prev - s_j)``.  The token loop is vectorized across queries,
    which leaves each query's own evaluation order untouched.

    With ``validate_exponents=True`` every exponent argument is checked
    to be <= 0 (the running-max rescaling guarantee).
    """
    Q, K, V, scale, precision = _as_dtype(problem, precision)
    b, h, n, d = Q.shape
    d_v = V.shape[3]
    dtype = precision.dtype
    Y = np.empty((b, h, n, d_v), dtype=dtype)
    for bi in range(b):
        for hi in range(h):
            Qs, Ks, Vs = Q[bi, hi], K[bi, hi], V[bi, hi]
            m = np.full(n, -np.inf, dtype=dtype)
            S = np.zeros(n, dtype=dtype)
            W = np.zeros((n, d_v), dtype=dtype)
            for j in range(n):
                s = (Qs @ Ks[j]) * scale
                keep = m >= s
                m_new = np.where(keep, m, s)
                with np.errstate(invalid="ignore"):
                    delta = np.where(keep, s - m_new, m - m_new)
                if validate_exponents and not np.all(delta <= 0):
                    raise NumericalError("exponent argument above zero; running max violated")
                f = np.exp(delta)
                S = np.where(keep, S + f, S * f + 1.0)
                fcol = f[:, None]
                kcol = keep[:, None]
                W = np.where(kcol, W + fcol * Vs[j], W * fcol + Vs[j])
                m = m_new
            _check_normalizer(S)
            Y[bi, hi] = W / S[:, None]
    return AttentionOutput(Tensor4(Y, precision))


def sequential_state(problem, precision, b_idx, h_idx, query_index):
    """Final (m, S, W) of the streaming recurrence for one query.

    Exposed for the verification harness, which compares block-composed
    states against the sequential fold.
    """
    Q, K, V, scale, precision = _as_dtype(problem, precision)
    n = Q.shape[2]
    if not (0 <= query_index < n):
        raise ShapeError(f"query index {query_index} out of range [0, {n})")
    q = Q[b_idx, h_idx, query_index]
    Ks, Vs = K[b_idx, h_idx], V[b_idx, h_idx]
    dtype = precision.dtype
    m = dtype.type(-np.inf)
    S = dtype.type(0.0)
    W = np.zeros(V.shape[3], dtype=dtype)
    for j in range(n):
        s = (q @ Ks[j]) * scale
        if m >= s:
            f = np.exp(s - m)
            S = S + f
            W = W + f * Vs[j]
        else:
            f = np.exp(m - s) if np.isfinite(m) else dtype.type(0.0)
            S = S * f + dtype.type(1.0)
            W = W * f + Vs[j]
            m = s
    return StateTriple(m, S, W)
