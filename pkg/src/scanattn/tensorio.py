"""Dense tensors, seeded problem generation, and the ATN1 file format.

Everything here exists so two runs (or two processes) can exchange
bit-identical inputs: generation uses a counter-based PRNG keyed per
(tensor, batch, head), and the file format round-trips payloads exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadDtypeError,
    BadMagicError,
    BadVersionError,
    DimsMismatchError,
    ShapeError,
    TruncatedPayloadError,
)
from .monoid import Precision

__all__ = [
    "Tensor4",
    "AttentionProblem",
    "GeneratorSpec",
    "SCENARIOS",
    "scenario_spec",
    "generate",
    "write_tensor",
    "read_tensor",
]

# 8-byte magic with CR/LF/EOF guards so text-mode mangling is caught early.
MAGIC = b"ATN1\r\n\x1a\n"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_HEADER = struct.Struct("<8sIB4I")

MAX_ELEMENTS = 1 << 40  # guards against dims that overflow memory or u32 headers


class Tensor4:
    """A (b, h, n, width) array, contiguous, finite, in a declared precision."""

    def __init__(self, data, precision=None):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeError(f"expected 4 axes (b, h, n, width), got shape {data.shape}")
        if precision is None:
            precision = Precision.from_dtype(data.dtype)
        data = np.ascontiguousarray(data, dtype=precision.dtype)
        if not np.all(np.isfinite(data)):
            raise ShapeError("tensor elements must all be finite")
        self.data = data
        self.precision = precision

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, precision):
        if precision is self.precision:
            return self
        return Tensor4(self.data.astype(precision.dtype), precision)

    def __eq__(self, other):
        return (
            isinstance(other, Tensor4)
            and self.precision is other.precision
            and self.dims == other.dims
            and bool(np.array_equal(self.data, other.data))
        )


@dataclass
class AttentionProblem:
    """Queries, keys, values and the fixed 1/sqrt(d) logit scale."""

    Q: Tensor4
    K: Tensor4
    V: Tensor4

    def __post_init__(self):
        b, h, n, d = self.Q.dims
        if self.K.dims != (b, h, n, d):
            raise ShapeError(f"K dims {self.K.dims} != Q dims {self.Q.dims}")
        if self.V.dims[:3] != (b, h, n):
            raise ShapeError(f"V dims {self.V.dims[:3]} disagree with Q on (b, h, n)")
        if not (self.Q.precision is self.K.precision is self.V.precision):
            raise ShapeError("Q, K, V must share one precision")

    @property
    def dims(self):
        b, h, n, d = self.Q.dims
        return b, h, n, d, self.V.dims[3]

    @property
    def precision(self):
        return self.Q.precision

    @property
    def scale(self):
        # derived, never stored: exactly 1/sqrt(d)
        return 1.0 / float(np.sqrt(self.Q.dims[3]))


# Scenario presets.  The narrative names come with no published dimensions,
# so these defaults are artifact choices (documented in the CLI reference
# and overridable everywhere).
SCENARIOS = {
    "regular": dict(b=2, h=4, n=256, d=32, d_v=32, feature_scale=1.0),
    "long": dict(b=1, h=1, n=4096, d=32, d_v=32, feature_scale=1.0),
    "stress": dict(b=2, h=2, n=1024, d=32, d_v=32, feature_scale=8.0),
}


@dataclass(frozen=True)
class GeneratorSpec:
    """Deterministic problem description.

    The same spec produces bitwise-identical tensors on every run and for
    every worker count; the stream layout depends only on (seed, tensor,
    batch, head).
    """

    seed: int
    scenario: str = "regular"
    b: int = 1
    h: int = 1
    n: int = 128
    d: int = 32
    d_v: int = 32
    precision: Precision = Precision.FP64

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ShapeError(f"unknown scenario {self.scenario!r}; use one of {sorted(SCENARIOS)}")
        for name in ("b", "h", "n", "d", "d_v"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ShapeError(f"dimension {name} must be a positive integer, got {v!r}")
            if v >= 1 << 32:
                raise ShapeError(f"dimension {name}={v} does not fit the u32 file header")
        if self.b * self.h * self.n * max(self.d, self.d_v) > MAX_ELEMENTS:
            raise ShapeError("requested dims overflow the element budget")

    @property
    def feature_scale(self):
        return SCENARIOS[self.scenario]["feature_scale"]


def scenario_spec(scenario, seed, precision=Precision.FP64, **overrides):
    """Build a GeneratorSpec from a named preset plus overrides."""
    base = {k: v for k, v in SCENARIOS[scenario].items() if k != "feature_scale"}
    base.update(overrides)
    return GeneratorSpec(seed=seed, scenario=scenario, precision=precision, **base)


_TENSOR_TAG = {"Q": 1, "K": 2, "V": 3}


def _slab_rng(seed, tensor_name, b_idx, h_idx):
    # Philox is counter-based: a fresh, documented key per (tensor, b, h)
    # slab gives identical streams regardless of generation order.
    tag = (_TENSOR_TAG[tensor_name] << 48) | (b_idx << 24) | h_idx
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(tag)]))


def generate(spec):
    """Materialize the problem described by ``spec``.

    Normal variates are drawn in float64 per (tensor, batch, head) slab,
    scaled by the scenario's feature scale (a power of two, so scaling is
    exact), then cast to the target precision.
    """
    dtype = spec.precision.dtype
    out = {}
    for name, width in (("Q", spec.d), ("K", spec.d), ("V", spec.d_v)):
        arr = np.empty((spec.b, spec.h, spec.n, width), dtype=dtype)
        for bi in range(spec.b):
            for hi in range(spec.h):
                slab = _slab_rng(spec.seed, name, bi, hi).standard_normal((spec.n, width))
                if spec.feature_scale != 1.0:
                    slab *= spec.feature_scale
                arr[bi, hi] = slab.astype(dtype)
        out[name] = Tensor4(arr, spec.precision)
    return AttentionProblem(out["Q"], out["K"], out["V"])


def write_tensor(path, t):
    """Serialize a Tensor4: magic, version, dtype code, u32 dims,
    little-endian payload, trailing u64 payload byte count."""
    code = _CODE_FOR[np.dtype(t.dtype)]
    payload = np.ascontiguousarray(t.data, dtype=_DTYPE_CODES[code]).tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, code, *t.dims))
        f.write(payload)
        f.write(struct.pack("<Q", len(payload)))


def read_tensor(path):
    """Read an ATN1 file back into a Tensor4, bit-exactly."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise BadMagicError(f"{path}: not an ATN1 file")
    magic, version, code, *dims = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise BadVersionError(f"{path}: version {version}, expected {VERSION}")
    if code not in _DTYPE_CODES:
        raise BadDtypeError(f"{path}: unknown dtype code {code}")
    le_dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    expected = count * le_dtype.itemsize
    body = raw[_HEADER.size:]
    if len(body) < expected + 8:
        raise TruncatedPayloadError(
            f"{path}: payload has {max(len(body) - 8, 0)} bytes, header promises {expected}"
        )
    if len(body) != expected + 8:
        raise DimsMismatchError(
            f"{path}: payload length {len(body) - 8} disagrees with dims {tuple(dims)}"
        )
    (trailer,) = struct.unpack("<Q", body[expected:expected + 8])
    if trailer != expected:
        raise TruncatedPayloadError(
            f"{path}: trailing byte count {trailer} != payload length {expected}"
        )
    data = np.frombuffer(body[:expected], dtype=le_dtype).reshape(dims)
    native = data.astype(data.dtype.newbyteorder("="), copy=True)
    return Tensor4(native, Precision.FP32 if code == 0 else Precision.FP64)
