"""Exception hierarchy shared across the library.

The CLI maps these onto exit codes: shape/config problems are exit 2,
numerical failures are exit 3, file-format and OS errors are exit 4.
"""


class ShapeError(ValueError):
    """Inconsistent dimensions or invalid configuration values."""


class NumericalError(ArithmeticError):
    """Arithmetic produced or received values the algorithm forbids
    (NaN inputs, negative normalizers, zero normalizer at finalization)."""


class MemoryCapExceeded(RuntimeError):
    """A computation would allocate more auxiliary memory than the
    configured cap allows.  Raised *before* the allocation happens so the
    caller can record a structured out-of-memory outcome."""

    def __init__(self, requested_bytes, cap_bytes, what=""):
        self.requested_bytes = int(requested_bytes)
        self.cap_bytes = int(cap_bytes)
        self.what = what
        super().__init__(
            f"{what or 'allocation'} needs {self.requested_bytes} bytes, "
            f"cap is {self.cap_bytes}"
        )


class TensorFileError(Exception):
    """Base class for tensor-file format violations."""


class BadMagicError(TensorFileError):
    """File does not start with the ATN1 magic bytes."""


class BadVersionError(TensorFileError):
    """Unsupported format version."""


class BadDtypeError(TensorFileError):
    """Unknown dtype code in the header."""


class TruncatedPayloadError(TensorFileError):
    """Payload is shorter than the header promises, or the trailing
    byte-count record disagrees with the payload actually present."""


class DimsMismatchError(TensorFileError):
    """Header dimensions are inconsistent with the payload length."""
