"""Exact softmax attention as a blocked parallel scan over an
associative state monoid, with a verification and benchmarking harness."""

__version__ = "0.1.0"

from .bench import BenchRecord, ScalingFit, emit_report, fit_scaling, run_bench
from .engine import (
    ScanConfig,
    ScanTrace,
    blockwise_states,
    depth_cap,
    inter_block_combine,
    intra_block_scan,
    leaf_state,
    scan_depth,
    scan_forward,
)
from .errors import (
    BadDtypeError,
    BadMagicError,
    BadVersionError,
    DimsMismatchError,
    MemoryCapExceeded,
    NumericalError,
    ShapeError,
    TensorFileError,
    TruncatedPayloadError,
)
from .monoid import (
    Precision,
    StateTriple,
    identity,
    merge,
    merge_lanes,
    merge_tree,
    renormalize,
    unnormalize,
)
from .oracles import (
    AttentionOutput,
    naive_attention,
    sequential_scan,
    sequential_state,
    vectorized_oracle,
)
from .tensorio import (
    SCENARIOS,
    AttentionProblem,
    GeneratorSpec,
    Tensor4,
    generate,
    read_tensor,
    scenario_spec,
    write_tensor,
)
from .verify import (
    BlockValidationReport,
    BoundCheckReport,
    DriftReport,
    block_validation,
    bound_check,
    drift_metrics,
)

__all__ = [name for name in dir() if not name.startswith("_")]
