"""The associative state algebra at the core of the library.

A contiguous range of attention tokens is summarized by a triple
``(m, S, W)``: the running maximum logit, the normalizer rescaled by
``exp(-m)``, and the value-weighted sum under the same rescaling.  Two
summaries of adjacent ranges combine with :func:`merge`, which re-anchors
the smaller-max side onto the larger one.  The triple set with ``merge``
and the identity ``(-inf, 0, 0)`` forms a monoid, which is what makes
tree-shaped parallel reduction legal.

All arithmetic funnels through :func:`merge_lanes_into` so that scalar
merges, tree reductions, and the blocked scan engine produce bit-identical
results for the same operand order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

__all__ = [
    "Precision",
    "StateTriple",
    "identity",
    "unnormalize",
    "renormalize",
    "merge",
    "merge_lanes",
    "merge_lanes_into",
    "merge_tree",
]


class Precision(enum.Enum):
    """Floating-point working precision.

    The unit roundoff is fixed by the mode: 2**-24 for FP32, 2**-53 for
    FP64.  It is not independently settable.
    """

    FP32 = "fp32"
    FP64 = "fp64"

    @property
    def dtype(self):
        return np.dtype(np.float32) if self is Precision.FP32 else np.dtype(np.float64)

    @property
    def unit_roundoff(self):
        return 2.0 ** -24 if self is Precision.FP32 else 2.0 ** -53

    @classmethod
    def from_dtype(cls, dtype):
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.FP32
        if dtype == np.float64:
            return cls.FP64
        raise ShapeError(f"unsupported dtype {dtype}; use float32 or float64")

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ShapeError(f"unknown precision {name!r}; use fp32 or fp64") from None


@dataclass(frozen=True)
class StateTriple:
    """Summary ``(m, S, W)`` of one contiguous token range.

    Invariants enforced on construction: ``S >= 0``; ``m == -inf`` only
    for the identity (then ``S == 0`` and ``W == 0``); no NaN anywhere;
    ``S`` and ``W`` finite whenever ``m`` is finite.
    """

    m: np.floating
    S: np.floating
    W: np.ndarray

    def __post_init__(self):
        W = np.atleast_1d(np.asarray(self.W))
        if W.ndim != 1:
            raise ShapeError(f"W must be a vector, got shape {W.shape}")
        dtype = W.dtype if W.dtype in (np.float32, np.float64) else np.dtype(np.float64)
        # triples are value types: own the vector so later mutation of a
        # source buffer cannot reach inside
        W = np.array(W, dtype=dtype, copy=True)
        m = dtype.type(self.m) if not isinstance(self.m, dtype.type) else self.m
        S = dtype.type(self.S) if not isinstance(self.S, dtype.type) else self.S
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "W", W)
        if np.isnan(m) or np.isnan(S) or np.isnan(W).any():
            raise NumericalError("NaN is not a valid triple component")
        if S < 0:
            raise NumericalError(f"normalizer must be non-negative, got {S}")
        if np.isneginf(m):
            if S != 0 or np.any(W != 0):
                raise NumericalError("m = -inf is reserved for the identity (S = 0, W = 0)")
        else:
            if not np.isfinite(m) or not np.isfinite(S) or not np.all(np.isfinite(W)):
                raise NumericalError("finite m requires finite S and W")

    @property
    def d_v(self):
        return self.W.shape[0]

    @property
    def dtype(self):
        return self.W.dtype

    def is_identity(self):
        return bool(np.isneginf(self.m))


def identity(d_v, precision=Precision.FP64):
    """Two-sided identity ``(-inf, 0, 0)`` materialized for a given width."""
    dtype = precision.dtype if isinstance(precision, Precision) else np.dtype(precision)
    return StateTriple(-np.inf, 0.0, np.zeros(d_v, dtype=dtype))


def unnormalize(t):
    """Expose the raw sums ``(m, S*e^m, W*e^m)``.

    The identity short-circuits to ``(-inf, 0, 0)`` without evaluating
    ``exp(-inf)``.
    """
    if t.is_identity():
        return -np.inf, t.dtype.type(0.0), np.zeros_like(t.W)
    scale = np.exp(t.m)
    return t.m, t.S * scale, t.W * scale


def renormalize(m, S_un, W_un):
    """Re-anchor raw sums: ``(m, S_un*e^-m, W_un*e^-m)``.

    Rejects ``S_un < 0`` (an upstream accumulation bug); returns the
    identity for ``m = -inf, S_un = 0``.
    """
    W_un = np.atleast_1d(np.asarray(W_un))
    if W_un.dtype not in (np.float32, np.float64):
        W_un = W_un.astype(np.float64)
    dtype = W_un.dtype
    if np.isnan(S_un) or S_un < 0:
        raise NumericalError(f"unnormalized sum must be non-negative, got {S_un}")
    if np.isneginf(m):
        if S_un != 0 or np.any(W_un != 0):
            raise NumericalError("m = -inf requires zero sums")
        return identity(W_un.shape[0], Precision.from_dtype(dtype))
    scale = np.exp(dtype.type(-m))
    return StateTriple(m, S_un * scale, W_un * scale)


def merge_lanes_into(m_a, S_a, W_a, m_b, S_b, W_b, out, scratch, guard_identity=True):
    """Lane-wise merge: the one place the combine arithmetic lives.

    ``m_*, S_*`` share a common shape X; ``W_*`` is X + (d_v,).  ``out``
    is ``(m_out, S_out, W_out)`` and ``scratch`` is ``(f_a, f_b, W_tmp)``
    with the same shapes; neither may alias the inputs.

    Per lane this computes the larger-anchor branch form

        m = max(m_a, m_b)
        S = S_a * e^(m_a - m) + S_b * e^(m_b - m)
        W = W_a * e^(m_a - m) + W_b * e^(m_b - m)

    where the max side's factor is exp(0) = 1.0, so multiplying by it is
    exact and the result is bit-identical to the asymmetric two-branch
    formula (ties take the first branch by the same argument).

    ``guard_identity`` repairs the one IEEE hazard: if both lanes are the
    identity, ``(-inf) - (-inf)`` is NaN; the guard forces those exponent
    arguments to ``-inf`` so the lane cleanly produces the identity.
    Callers that can prove all anchors finite (e.g. leaf scans) may skip
    the guard.
    """
    m_out, S_out, W_out = out
    f_a, f_b, W_tmp = scratch
    np.maximum(m_a, m_b, out=m_out)
    with np.errstate(invalid="ignore"):
        np.subtract(m_a, m_out, out=f_a)
        np.subtract(m_b, m_out, out=f_b)
    if guard_identity:
        np.copyto(f_a, -np.inf, where=np.isnan(f_a))
        np.copyto(f_b, -np.inf, where=np.isnan(f_b))
    np.exp(f_a, out=f_a)
    np.exp(f_b, out=f_b)
    np.multiply(W_a, f_a[..., None], out=W_out)
    np.multiply(W_b, f_b[..., None], out=W_tmp)
    np.add(W_out, W_tmp, out=W_out)
    np.multiply(S_a, f_a, out=S_out)
    np.multiply(S_b, f_b, out=f_a)  # f_a is free now
    np.add(S_out, f_a, out=S_out)
    return out


def merge_lanes(m_a, S_a, W_a, m_b, S_b, W_b, guard_identity=True):
    """Allocating wrapper over :func:`merge_lanes_into`."""
    m_a, m_b = np.broadcast_arrays(m_a, m_b)
    S_a, S_b = np.broadcast_arrays(S_a, S_b)
    W_a, W_b = np.broadcast_arrays(W_a, W_b)
    out = (np.empty_like(m_a), np.empty_like(S_a), np.empty_like(W_a))
    scratch = (np.empty_like(m_a), np.empty_like(m_a), np.empty_like(W_a))
    return merge_lanes_into(m_a, S_a, W_a, m_b, S_b, W_b, out, scratch,
                            guard_identity=guard_identity)


def merge(a, b):
    """Combine two range summaries; the monoid operator.

    Identity operands short-circuit to a bitwise copy of the other side
    before any exponentiation (``exp(-inf - -inf)`` would be NaN).
    """
    if a.d_v != b.d_v:
        raise ShapeError(f"value widths differ: {a.d_v} vs {b.d_v}")
    if a.is_identity():
        return b
    if b.is_identity():
        return a
    m, S, W = merge_lanes(
        np.asarray(a.m)[None], np.asarray(a.S)[None], a.W[None, :],
        np.asarray(b.m)[None], np.asarray(b.S)[None], b.W[None, :],
        guard_identity=False,
    )
    return StateTriple(m[0], S[0], W[0])


def merge_tree(items, d_v=None):
    """Reduce a sequence of triples by a balanced binary tree.

    Adjacent pairs merge bottom-up (an odd tail passes through), so on a
    power-of-two count the tree shape matches a pairwise up-sweep.  The
    empty sequence folds to the identity.
    """
    items = list(items)
    if not items:
        return identity(0 if d_v is None else d_v)
    if len(items) == 1:
        return items[0]
    widths = {t.d_v for t in items}
    if len(widths) != 1:
        raise ShapeError(f"mixed value widths {sorted(widths)}")
    dtype = items[0].dtype
    m = np.array([t.m for t in items], dtype=dtype)
    S = np.array([t.S for t in items], dtype=dtype)
    W = np.stack([t.W for t in items]).astype(dtype, copy=False)
    while m.shape[0] > 1:
        k = m.shape[0]
        even = k - (k % 2)
        mm, SS, WW = merge_lanes(
            m[0:even:2], S[0:even:2], W[0:even:2],
            m[1:even:2], S[1:even:2], W[1:even:2],
        )
        if k % 2:
            mm = np.concatenate([mm, m[-1:]])
            SS = np.concatenate([SS, S[-1:]])
            WW = np.concatenate([WW, W[-1:]])
        m, S, W = mm, SS, WW
    return StateTriple(m[0], S[0], W[0])
