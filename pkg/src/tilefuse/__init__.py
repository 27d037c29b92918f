"""Tiled GEMM engine with composable epilogue fusion.

Mainloop-resident epilogues (residual adds, normalization prologues, gated
activations, rotary rotations, streamed loss reductions) turn multi-launch
transformer segments into chains of GEMMs coupled only through per-row
statistics, with a byte-exact traffic ledger to show what that saves.
"""

from .checks import (
    CheckResult,
    NumericsTrial,
    median_ratio,
    run_checks,
    run_numerics,
)
from .codt import read_tensor, write_tensor
from .engine import GemmProblem, KernelResult, run_gemm, run_gemm_trans
from .epilogue import (
    AuxTileStore,
    EpilogueProgram,
    OnlineLse,
    PairwiseRope,
    PairwiseSwiglu,
    PairwiseSwigluBackward,
    PartialColSum,
    PartialRowDot,
    PartialSlot,
    PartialSumSq,
    ResidualAdd,
    RmsNormBackwardLocal,
    RowScale,
    RowVecMul,
    TargetGather,
    row_block_layout,
)
from .errors import (
    BindingError,
    ConfigError,
    ContainerError,
    DegenerateError,
    DimensionError,
    LabelError,
    MissingGatherError,
    PairingError,
    ProbeError,
    ProgramError,
    TapeError,
    TileFuseError,
)
from .kernels import (
    GrrgResult,
    LayerForwardResult,
    LayerGrads,
    LayerTape,
    LayerWeights,
    LmHeadResult,
    PipelineConfig,
    ffn_width,
    gemm_partial_xent,
    gemm_residual_partial_rms,
    gemm_rms_partial_xent,
    gemm_rms_rope,
    gemm_rms_swiglu,
    gemm_rmsnorm_backward,
    gemm_rope,
    gemm_row_scale,
    gemm_swiglu,
    gemm_swiglu_backward,
    interleave_gate_up,
    layer_backward,
    layer_forward,
    lm_head_forward,
    pipeline_grrg_canonical,
    pipeline_grrg_forward,
    qkv_rope_tables,
    rope_backward_stat,
    rope_tables,
    split_gate_up,
)
from .reductions import (
    combine_lse,
    cross_entropy_finalize,
    finalize_rms,
    finalize_rowdot,
    reduce_row_partials,
)
from .tensors import (
    DenseMatrix,
    PrecisionMode,
    TileShape,
    Vector,
    quantize,
    rel_error,
    stat_mode,
    tile_coords,
)
from .traffic import (
    CompareReport,
    LaunchRecord,
    TrafficLedger,
    canonical_ledger,
    compare,
)

__version__ = "0.1.0"
