"""Fused transformer kernels and pipeline compositions.

Each kernel is one engine launch: a GEMM plus an epilogue program, named
and instrumented so pipeline ledgers can be compared against canonical
op-by-op sequences.  The pipelines chain kernels through row statistics
(inverse RMS, relocated row dots, streamed LSE pairs) instead of through
re-read activations, which is where the traffic savings come from.

Normalization gains are folded into the producing launch and per-row
scales into the consuming launch: for a row-diagonal scale R,
(R @ X) @ W == R @ (X @ W), so the scale can be applied to the next
GEMM's output instead of its input.  The commutation and relocation tests
pin this identity numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import GemmProblem, KernelResult, run_gemm
from .epilogue import (
    AuxTileStore,
    EpilogueProgram,
    OnlineLse,
    PairwiseRope,
    PairwiseSwiglu,
    PairwiseSwigluBackward,
    PartialSumSq,
    PartialColSum,
    PartialRowDot,
    ResidualAdd,
    RmsNormBackwardLocal,
    RowScale,
    RowVecMul,
    StoreKind,
    TargetGather,
    PartialSlot,
    row_block_layout,
)
from .errors import ConfigError, DimensionError, TapeError
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
    stat_mode,
)
from . import traffic
from .traffic import LaunchRecord, TrafficLedger


def ffn_width(hidden: int) -> int:
    """Gated-FFN preactivation width for a given hidden size.

    floor(8*hidden/3) rounded up to a multiple of 256, e.g. 2048 -> 5632,
    4096 -> 11008, 8192 -> 22016.
    """
    if hidden <= 0:
        raise ConfigError(f"hidden size must be positive, got {hidden}")
    base = (8 * hidden) // 3
    return -(-base // 256) * 256


@dataclass(frozen=True)
class PipelineConfig:
    """Shared shape, tiling, and precision parameters for pipeline runs."""

    hidden: int
    ffn: Optional[int] = None
    tile_m: int = 128
    tile_n: int = 128
    reduction_tile_n: int = 128
    precision: PrecisionMode = PrecisionMode.EXACT64
    eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden <= 0:
            raise ConfigError(f"hidden size must be positive, got {self.hidden}")
        if self.hidden % 2:
            raise ConfigError("hidden size must be even (rotary pairs)")
        if self.ffn is not None and (self.ffn <= 0 or self.ffn % 2):
            raise ConfigError(f"ffn width must be positive and even, got {self.ffn}")
        if min(self.tile_m, self.tile_n, self.reduction_tile_n) <= 0:
            raise ConfigError("tile parameters must be positive")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")

    @property
    def ffn_resolved(self) -> int:
        if self.ffn is not None:
            return self.ffn
        width = ffn_width(self.hidden)
        # derived widths are guaranteed even and 256-aligned
        assert width % 256 == 0
        return width

    @property
    def tile_shape(self) -> TileShape:
        return TileShape(self.tile_m, self.tile_n)

    @property
    def shape_params(self) -> traffic.Shape:
        return traffic.Shape(
            tile_m=self.tile_m,
            tile_n=self.tile_n,
            rtn=self.reduction_tile_n,
            precision=self.precision,
        )


def _problem(
    a: DenseMatrix,
    b: DenseMatrix,
    *,
    trans_a: bool = False,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
) -> GemmProblem:
    m = a.shape[1] if trans_a else a.shape[0]
    k = a.shape[0] if trans_a else a.shape[1]
    n = b.shape[0] if trans_b else b.shape[1]
    kb = b.shape[1] if trans_b else b.shape[0]
    if k != kb:
        raise DimensionError(f"contraction dims differ: a gives {k}, b gives {kb}")
    return GemmProblem(
        m=m,
        n=n,
        k=k,
        trans_a=trans_a,
        trans_b=trans_b,
        tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n,
        precision=precision,
    )


# ---------------------------------------------------------------------------
# rotary tables


def rope_tables(
    m: int,
    width: int,
    *,
    base: float = 10000.0,
    start: int = 0,
    precision: PrecisionMode = PrecisionMode.EXACT64,
) -> tuple[DenseMatrix, DenseMatrix]:
    """Position-dependent cos/sin tables with each angle duplicated per pair.

    Pair p of a width-w row at position t rotates by t * base**(-2p/w); the
    duplicated layout lets a tile read exactly its own column range.
    """
    if width <= 0 or width % 2:
        raise DimensionError(f"rotary width must be positive and even, got {width}")
    if m <= 0:
        raise DimensionError(f"table rows must be positive, got {m}")
    pairs = np.arange(width // 2, dtype=np.float64)
    inv_freq = base ** (-2.0 * pairs / width)
    angles = (start + np.arange(m, dtype=np.float64))[:, None] * inv_freq[None, :]
    cos = np.repeat(np.cos(angles), 2, axis=1)
    sin = np.repeat(np.sin(angles), 2, axis=1)
    return (
        DenseMatrix.from_array(cos, precision),
        DenseMatrix.from_array(sin, precision),
    )


def qkv_rope_tables(
    m: int,
    hidden: int,
    *,
    base: float = 10000.0,
    start: int = 0,
    precision: PrecisionMode = PrecisionMode.EXACT64,
) -> tuple[DenseMatrix, DenseMatrix]:
    """Tables for a packed (q, k, v) projection of width 3*hidden.

    The q and k spans rotate with the same per-position angles; the v span
    is left untouched (cos = 1, sin = 0), which keeps the whole projection
    a single launch.
    """
    cos_h, sin_h = rope_tables(m, hidden, base=base, start=start, precision=precision)
    cos = np.ones((m, 3 * hidden), dtype=np.float64)
    sin = np.zeros((m, 3 * hidden), dtype=np.float64)
    cos[:, : 2 * hidden] = np.tile(cos_h.data, (1, 2))
    sin[:, : 2 * hidden] = np.tile(sin_h.data, (1, 2))
    return (
        DenseMatrix.from_array(cos, precision),
        DenseMatrix.from_array(sin, precision),
    )


def interleave_gate_up(
    gate: DenseMatrix, up: DenseMatrix
) -> DenseMatrix:
    """Convert split (gate, up) projection weights to the interleaved layout.

    Column 2j of the result drives the gate lane and column 2j+1 the up
    lane, matching what the gated-activation epilogue expects.
    """
    if gate.shape != up.shape:
        raise DimensionError(
            f"gate and up shapes differ: {gate.shape} vs {up.shape}"
        )
    if gate.precision is not up.precision:
        raise ConfigError("gate and up precisions differ")
    out = np.empty((gate.rows, 2 * gate.cols), dtype=np.float64)
    out[:, 0::2] = gate.data
    out[:, 1::2] = up.data
    return DenseMatrix.from_array(out, gate.precision)


def split_gate_up(w: DenseMatrix) -> tuple[DenseMatrix, DenseMatrix]:
    """Inverse of interleave_gate_up."""
    if w.cols % 2:
        raise DimensionError(f"interleaved width must be even, got {w.cols}")
    return (
        DenseMatrix.from_array(w.data[:, 0::2], w.precision),
        DenseMatrix.from_array(w.data[:, 1::2], w.precision),
    )


# ---------------------------------------------------------------------------
# single-launch kernels


def gemm_rope(
    a: DenseMatrix,
    b: DenseMatrix,
    cos: DenseMatrix,
    sin: DenseMatrix,
    *,
    backward: bool = False,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """GEMM with pairwise rotation of the output applied in the epilogue."""
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    program = EpilogueProgram([PairwiseRope("cos", "sin", backward=backward)])
    return run_gemm(
        problem, a, b, program, {"cos": cos, "sin": sin},
        kernel_name=traffic.K_ROPE, ledger=ledger, tile_order=tile_order,
    )


def gemm_swiglu(
    a: DenseMatrix,
    b: DenseMatrix,
    *,
    save_preact: bool = False,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """GEMM producing interleaved (gate, up) pairs, gated in the epilogue."""
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    prims = []
    if save_preact:
        prims.append(AuxTileStore("preact"))
    prims.append(PairwiseSwiglu())
    program = EpilogueProgram(prims)
    return run_gemm(
        problem, a, b, program,
        kernel_name=traffic.K_SWIGLU, ledger=ledger, tile_order=tile_order,
    )


def gemm_partial_xent(
    a: DenseMatrix,
    b: DenseMatrix,
    labels: np.ndarray,
    *,
    store_logits: bool = True,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """Logit GEMM that gathers targets and streams LSE pairs as it goes."""
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    program = EpilogueProgram(
        [TargetGather("labels", "target"), OnlineLse("lse")]
    )
    return run_gemm(
        problem, a, b, program, {"labels": labels},
        kernel_name=traffic.K_PARTIAL_XENT, ledger=ledger,
        tile_order=tile_order, store_main=store_logits,
    )


def gemm_residual_partial_rms(
    a: DenseMatrix,
    b: DenseMatrix,
    residual: DenseMatrix,
    gamma: Vector,
    *,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """GEMM + residual add + normalization prologue in one launch.

    Stores the pre-norm sum as `pre_norm`, flushes its blocked sums of
    squares as `sumsq`, and writes gains-scaled (but not yet row-scaled)
    values as the main output.  The inverse-RMS row scale is applied by
    whichever launch consumes the main output, after `finalize_rms`.
    """
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    program = EpilogueProgram(
        [
            ResidualAdd("residual"),
            AuxTileStore("pre_norm"),
            PartialSumSq("sumsq"),
            RowVecMul("gamma"),
        ]
    )
    return run_gemm(
        problem, a, b, program, {"residual": residual, "gamma": gamma},
        kernel_name=traffic.K_RESIDUAL_RMS, ledger=ledger, tile_order=tile_order,
    )


def gemm_row_scale(
    a: DenseMatrix,
    b: DenseMatrix,
    scale: Vector,
    *,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """GEMM with a deferred per-row scale applied to its output."""
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    program = EpilogueProgram([RowScale("scale")])
    return run_gemm(
        problem, a, b, program, {"scale": scale},
        kernel_name=traffic.K_ROW_SCALE, ledger=ledger, tile_order=tile_order,
    )


def gemm_rms_swiglu(
    a: DenseMatrix,
    b: DenseMatrix,
    scale: Vector,
    *,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """Row scale + preactivation save + gated activation in one launch."""
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    program = EpilogueProgram(
        [RowScale("scale"), AuxTileStore("preact"), PairwiseSwiglu()]
    )
    return run_gemm(
        problem, a, b, program, {"scale": scale},
        kernel_name=traffic.K_RMS_SWIGLU, ledger=ledger, tile_order=tile_order,
    )


def gemm_rms_rope(
    a: DenseMatrix,
    b: DenseMatrix,
    scale: Vector,
    cos: DenseMatrix,
    sin: DenseMatrix,
    *,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """Row scale + pairwise rotation in one launch."""
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    program = EpilogueProgram(
        [RowScale("scale"), PairwiseRope("cos", "sin")]
    )
    return run_gemm(
        problem, a, b, program, {"scale": scale, "cos": cos, "sin": sin},
        kernel_name=traffic.K_RMS_ROPE, ledger=ledger, tile_order=tile_order,
    )


def gemm_rms_partial_xent(
    a: DenseMatrix,
    b: DenseMatrix,
    scale: Vector,
    labels: np.ndarray,
    *,
    store_logits: bool = False,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """Row scale + target gather + streamed LSE; logits stay in registers.

    With store_logits left False the m-by-vocab logit matrix is never
    written anywhere, which is the entire point of this launch.
    """
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    program = EpilogueProgram(
        [RowScale("scale"), TargetGather("labels", "target"), OnlineLse("lse")]
    )
    return run_gemm(
        problem, a, b, program, {"scale": scale, "labels": labels},
        kernel_name=traffic.K_RMS_XENT, ledger=ledger,
        tile_order=tile_order, store_main=store_logits,
    )


def gemm_rmsnorm_backward(
    a: DenseMatrix,
    b: DenseMatrix,
    pre_norm: DenseMatrix,
    inv_rms: Vector,
    gamma: Vector,
    stat: Vector,
    *,
    grad_in: Optional[DenseMatrix] = None,
    trans_a: bool = False,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """Gradient GEMM fused with the normalization backward.

    The GEMM maps the downstream gradient back through the consuming weight
    matrix; the epilogue finishes the normalization backward per tile using
    the precomputed row statistic, emits the recomputed gains-scaled
    normalized values (`normed`, feeding the weight-gradient GEMM), and
    flushes per-tile-row gain-gradient partials (`gamma_grad`).  With
    ``grad_in`` bound, the residual branch gradient is accumulated for free.
    """
    problem = _problem(
        a, b, trans_a=trans_a, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    accumulate = "grad_in" if grad_in is not None else None
    program = EpilogueProgram(
        [
            RmsNormBackwardLocal(
                "pre_norm", "inv_rms", "gamma", "stat",
                accumulate=accumulate,
                normed_out="normed", gamma_grad="gamma_grad",
            )
        ]
    )
    bindings = {
        "pre_norm": pre_norm,
        "inv_rms": inv_rms,
        "gamma": gamma,
        "stat": stat,
    }
    if grad_in is not None:
        bindings["grad_in"] = grad_in
    return run_gemm(
        problem, a, b, program, bindings,
        kernel_name=traffic.K_RMSNORM_BWD, ledger=ledger, tile_order=tile_order,
    )


def gemm_swiglu_backward(
    a: DenseMatrix,
    b: DenseMatrix,
    preact: DenseMatrix,
    *,
    trans_b: bool = False,
    tile_shape: TileShape = TileShape(128, 128),
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
    tile_order=None,
) -> KernelResult:
    """Gradient GEMM fused with the gated-activation backward.

    Main output is the preactivation gradient at doubled width.  The
    recomputed activation output (`recompute`) is emitted for the weight
    gradient, and blocked <preact, grad_preact> partials (`rowdot`) carry
    the row statistic of the preceding normalization backward.
    """
    problem = _problem(
        a, b, trans_b=trans_b, tile_shape=tile_shape,
        reduction_tile_n=reduction_tile_n, precision=precision,
    )
    program = EpilogueProgram(
        [PairwiseSwigluBackward("preact", "recompute", "rowdot")]
    )
    return run_gemm(
        problem, a, b, program, {"preact": preact},
        kernel_name=traffic.K_SWIGLU_BWD, ledger=ledger, tile_order=tile_order,
    )


def rope_backward_stat(
    grad: DenseMatrix,
    rotated: DenseMatrix,
    cos: DenseMatrix,
    sin: DenseMatrix,
    *,
    tile_n: int = 128,
    reduction_tile_n: int = 128,
    precision: PrecisionMode = PrecisionMode.EXACT64,
    ledger: Optional[TrafficLedger] = None,
) -> tuple[DenseMatrix, PartialSlot]:
    """Counter-rotate an output gradient and emit boundary row-dot partials.

    At a pipeline boundary there is no following gradient GEMM to relocate
    the normalization row statistic into, so this standalone pass computes
    it directly.  Rotation preserves row dot products, therefore
    <rotated, grad> == <preact, grad_preact>, and the pass reads only
    tensors it needs anyway (the output gradient, the tables, and the taped
    rotated output) rather than re-deriving the preactivation.
    """
    m, n = grad.shape
    for name, t in (("rotated", rotated), ("cos", cos), ("sin", sin)):
        if t.shape != (m, n):
            raise DimensionError(f"{name} has shape {t.shape}, expected {(m, n)}")
    if n % 2:
        raise DimensionError(f"rotary width must be even, got {n}")
    acc = precision.acc_dtype
    g = grad.data.astype(acc, copy=False)
    c = cos.data.astype(acc, copy=False)
    s = sin.data.astype(acc, copy=False)
    g0, g1 = g[:, 0::2], g[:, 1::2]
    out = np.empty_like(g)
    out[:, 0::2] = g0 * c[:, 0::2] + g1 * s[:, 0::2]
    out[:, 1::2] = -g0 * s[:, 1::2] + g1 * c[:, 1::2]
    grad_z = DenseMatrix.from_array(out, precision)

    blocks = row_block_layout(n, tile_n, reduction_tile_n)
    prod = g * rotated.data.astype(acc, copy=False)
    starts = [b.start for b in blocks]
    sums = np.add.reduceat(prod, starts, axis=1)
    counts = np.array([b.width for b in blocks], dtype=np.int64)
    slot = PartialSlot(
        kind=StoreKind.ROW_SUM,
        data=sums.astype(np.float64),
        counts=counts,
        precision=precision,
    ).freeze()

    w = precision.storage_bytes
    pw = precision.partial_bytes
    record = LaunchRecord(
        traffic.K_ROPE_BWD_STAT,
        4 * m * n * w,
        m * n * w + m * len(blocks) * pw,
    )
    if ledger is not None:
        ledger.add(record)
    return grad_z, slot


# ---------------------------------------------------------------------------
# GEMM -> residual -> normalize -> GEMM pipeline


@dataclass
class GrrgResult:
    """Fused pipeline outputs plus everything a backward pass would tape."""

    y: DenseMatrix
    pre_norm: DenseMatrix
    normed: DenseMatrix
    inv_rms: Vector
    ledger: TrafficLedger


def pipeline_grrg_forward(
    x: DenseMatrix,
    w0: DenseMatrix,
    z: DenseMatrix,
    gamma: Vector,
    w1: DenseMatrix,
    *,
    config: PipelineConfig,
) -> GrrgResult:
    """(x @ w0 + z) normalized, gains-scaled, and pushed through w1.

    Three launches: the producing GEMM folds the residual add, the pre-norm
    save, the squared-sum partials, and the gains; a statistics-only
    finalize produces the inverse RMS; the consuming GEMM applies it as a
    deferred row scale.  The m-by-d normalized activations are never
    re-read at full width between launches.
    """
    ledger = TrafficLedger()
    k4 = gemm_residual_partial_rms(
        x, w0, z, gamma,
        tile_shape=config.tile_shape,
        reduction_tile_n=config.reduction_tile_n,
        precision=config.precision,
        ledger=ledger,
    )
    r = finalize_rms(k4.aux["sumsq"], config.eps, ledger=ledger)
    k5 = gemm_row_scale(
        k4.main, w1, r,
        tile_shape=config.tile_shape,
        reduction_tile_n=config.reduction_tile_n,
        precision=config.precision,
        ledger=ledger,
    )
    return GrrgResult(
        y=k5.main,
        pre_norm=k4.aux["pre_norm"],
        normed=k4.main,
        inv_rms=r,
        ledger=ledger,
    )


def pipeline_grrg_canonical(
    x: DenseMatrix,
    w0: DenseMatrix,
    z: DenseMatrix,
    gamma: Vector,
    w1: DenseMatrix,
    *,
    config: PipelineConfig,
) -> tuple[DenseMatrix, TrafficLedger]:
    """Unfused reference schedule at the same storage precision.

    Four launches, each reading its inputs from storage and writing its
    result back at storage width; accumulation stays at the accumulator
    width inside each op, exactly like the fused path.  This is the
    numerics and traffic baseline, not an oracle: in exact arithmetic it
    matches the fused pipeline to reduction roundoff.
    """
    acc = config.precision.acc_dtype

    def q(arr):
        return quantize(np.asarray(arr, dtype=np.float64), config.precision)

    h0 = q(x.data.astype(acc) @ w0.data.astype(acc))
    h1 = q(h0.astype(acc) + z.data.astype(acc))
    ha = h1.astype(acc)
    ms = np.mean(ha * ha, axis=1, dtype=acc)
    r = (1.0 / np.sqrt(ms + acc.type(config.eps))).astype(acc)
    h2 = q(ha * r[:, None] * gamma.data.astype(acc)[None, :])
    y = q(h2.astype(acc) @ w1.data.astype(acc))

    m, k = x.shape
    d = w0.shape[1]
    n = w1.shape[1]
    ledger = traffic.canonical_ledger(
        traffic.canonical_grrg_ops(m, k, d, n), config.precision
    )
    return DenseMatrix(y, config.precision), ledger


# ---------------------------------------------------------------------------
# transformer layer


@dataclass(frozen=True)
class LayerWeights:
    """Parameters of one pre-norm block: out-proj, gated FFN, qkv projection.

    `w_gate_up` is stored interleaved (even columns gate, odd columns up);
    use `interleave_gate_up` to convert split checkpoints.
    """

    w_out: DenseMatrix        # (d, d)
    gamma_ffn: Vector         # (d,)
    w_gate_up: DenseMatrix    # (d, ffn), interleaved
    w_down: DenseMatrix       # (ffn/2, d)
    gamma_qkv: Vector         # (d,)
    w_qkv: DenseMatrix        # (d, 3d)

    def check(self, config: PipelineConfig) -> None:
        d = config.hidden
        ffn = config.ffn_resolved
        expect = {
            "w_out": (self.w_out.shape, (d, d)),
            "gamma_ffn": ((len(self.gamma_ffn),), (d,)),
            "w_gate_up": (self.w_gate_up.shape, (d, ffn)),
            "w_down": (self.w_down.shape, (ffn // 2, d)),
            "gamma_qkv": ((len(self.gamma_qkv),), (d,)),
            "w_qkv": (self.w_qkv.shape, (d, 3 * d)),
        }
        for name, (got, want) in expect.items():
            if got != want:
                raise DimensionError(f"{name} has shape {got}, expected {want}")

    @classmethod
    def random(
        cls, rng: np.random.Generator, config: PipelineConfig, scale: float = 0.2
    ) -> "LayerWeights":
        d = config.hidden
        ffn = config.ffn_resolved
        p = config.precision
        mk = lambda *shape: DenseMatrix.from_array(
            rng.standard_normal(shape) * scale, p
        )
        return cls(
            w_out=mk(d, d),
            gamma_ffn=Vector.from_array(1.0 + 0.1 * rng.standard_normal(d), p),
            w_gate_up=mk(d, ffn),
            w_down=mk(ffn // 2, d),
            gamma_qkv=Vector.from_array(1.0 + 0.1 * rng.standard_normal(d), p),
            w_qkv=mk(d, 3 * d),
        )


@dataclass
class LayerTape:
    """Saved forward state consumed by layer_backward."""

    x: DenseMatrix
    pre_norm_a: DenseMatrix
    inv_rms_a: Vector
    preact: DenseMatrix
    pre_norm_b: DenseMatrix
    inv_rms_b: Vector
    qkv: DenseMatrix
    cos: DenseMatrix
    sin: DenseMatrix

    def check(self, config: PipelineConfig) -> None:
        m, d = self.x.shape
        ffn = config.ffn_resolved
        expect = {
            "pre_norm_a": (self.pre_norm_a.shape, (m, d)),
            "preact": (self.preact.shape, (m, ffn)),
            "pre_norm_b": (self.pre_norm_b.shape, (m, d)),
            "qkv": (self.qkv.shape, (m, 3 * d)),
            "cos": (self.cos.shape, (m, 3 * d)),
            "sin": (self.sin.shape, (m, 3 * d)),
        }
        for name, (got, want) in expect.items():
            if got != want:
                raise TapeError(f"tape entry {name} has shape {got}, expected {want}")
        if len(self.inv_rms_a) != m or len(self.inv_rms_b) != m:
            raise TapeError("tape inverse-RMS vectors must have one entry per row")


@dataclass
class LayerForwardResult:
    qkv: DenseMatrix
    residual: DenseMatrix
    tape: LayerTape
    ledger: TrafficLedger


def layer_forward(
    x: DenseMatrix,
    z: DenseMatrix,
    weights: LayerWeights,
    cos: DenseMatrix,
    sin: DenseMatrix,
    *,
    config: PipelineConfig,
) -> LayerForwardResult:
    """One pre-norm block: out-proj + gated FFN + normalized qkv projection.

    Six launches:

      1. x @ w_out + z, saving the pre-norm sum and squared-sum partials
      2. finalize inverse RMS (statistics only)
      3. gated FFN up-projection with deferred row scale, preactivation save
      4. FFN down-projection + residual, again with norm partials
      5. finalize inverse RMS
      6. qkv projection with deferred row scale and rotary rotation

    With all-zero x and z and unit gains, both squared sums are zero, so the
    row scales collapse to 1/sqrt(eps) and every output is exactly the
    eps-governed constant path; nothing here divides by a data-dependent
    quantity that could vanish.
    """
    weights.check(config)
    if x.shape != z.shape:
        raise DimensionError(f"x and z shapes differ: {x.shape} vs {z.shape}")
    ledger = TrafficLedger()
    kw = dict(
        tile_shape=config.tile_shape,
        reduction_tile_n=config.reduction_tile_n,
        precision=config.precision,
        ledger=ledger,
    )

    k4a = gemm_residual_partial_rms(x, weights.w_out, z, weights.gamma_ffn, **kw)
    ra = finalize_rms(k4a.aux["sumsq"], config.eps, ledger=ledger)
    k6 = gemm_rms_swiglu(k4a.main, weights.w_gate_up, ra, **kw)

    k4b = gemm_residual_partial_rms(
        k6.main, weights.w_down, k4a.aux["pre_norm"], weights.gamma_qkv, **kw
    )
    rb = finalize_rms(k4b.aux["sumsq"], config.eps, ledger=ledger)
    k7 = gemm_rms_rope(k4b.main, weights.w_qkv, rb, cos, sin, **kw)

    tape = LayerTape(
        x=x,
        pre_norm_a=k4a.aux["pre_norm"],
        inv_rms_a=ra,
        preact=k6.aux["preact"],
        pre_norm_b=k4b.aux["pre_norm"],
        inv_rms_b=rb,
        qkv=k7.main,
        cos=cos,
        sin=sin,
    )
    return LayerForwardResult(
        qkv=k7.main, residual=k4b.aux["pre_norm"], tape=tape, ledger=ledger
    )


@dataclass
class LayerGrads:
    x: DenseMatrix
    z: DenseMatrix
    w_out: DenseMatrix
    gamma_ffn: Vector
    w_gate_up: DenseMatrix
    w_down: DenseMatrix
    gamma_qkv: Vector
    w_qkv: DenseMatrix
    ledger: TrafficLedger


def layer_backward(
    grad_qkv: DenseMatrix,
    tape: LayerTape,
    weights: LayerWeights,
    *,
    grad_residual: Optional[DenseMatrix] = None,
    config: PipelineConfig,
) -> LayerGrads:
    """Backward of layer_forward from (grad_qkv, optional grad_residual).

    The boundary case: the qkv gradient enters at the rotated output, where
    no following gradient GEMM exists to relocate the normalization row
    statistic into.  The counter-rotation pass therefore emits the row-dot
    partials itself (rotation preserves row dot products, so
    <qkv, grad_qkv> == <preact_b, grad_preact_b>), and a standalone
    finalize turns them into the statistic, keeping the extra traffic to
    partial blocks instead of an activation re-read.

    Inside the network the same statistic rides the gated-activation
    backward launch, and each normalization backward doubles as the next
    gradient GEMM with residual accumulation folded in.  The returned
    `z` gradient aliases the `x`-side pre-norm gradient (the skip branch),
    costing no extra launch.
    """
    weights.check(config)
    tape.check(config)
    d = config.hidden
    ledger = TrafficLedger()
    kw = dict(
        tile_shape=config.tile_shape,
        reduction_tile_n=config.reduction_tile_n,
        precision=config.precision,
        ledger=ledger,
    )

    # boundary: counter-rotate and collect the relocated row-dot partials
    grad_zb, rowdot_b = rope_backward_stat(
        grad_qkv, tape.qkv, tape.cos, tape.sin,
        tile_n=config.tile_n,
        reduction_tile_n=config.reduction_tile_n,
        precision=config.precision,
        ledger=ledger,
    )
    s_b = finalize_rowdot(rowdot_b, d, ledger=ledger)

    k9b = gemm_rmsnorm_backward(
        grad_zb, weights.w_qkv, tape.pre_norm_b, tape.inv_rms_b,
        weights.gamma_qkv, s_b,
        grad_in=grad_residual, trans_b=True, **kw,
    )
    grad_h1b = k9b.main
    w_qkv_grad = run_gemm(
        _problem(
            k9b.aux["normed"], grad_zb, trans_a=True,
            tile_shape=config.tile_shape,
            reduction_tile_n=config.reduction_tile_n,
            precision=config.precision,
        ),
        k9b.aux["normed"], grad_zb,
        kernel_name=traffic.K_GEMM, ledger=ledger,
    )
    gamma_qkv_grad = reduce_row_partials(k9b.aux["gamma_grad"], ledger=ledger)

    k10 = gemm_swiglu_backward(
        grad_h1b, weights.w_down, tape.preact, trans_b=True, **kw
    )
    grad_za = k10.main
    s_a = finalize_rowdot(k10.aux["rowdot"], d, ledger=ledger)
    w_down_grad = run_gemm(
        _problem(
            k10.aux["recompute"], grad_h1b, trans_a=True,
            tile_shape=config.tile_shape,
            reduction_tile_n=config.reduction_tile_n,
            precision=config.precision,
        ),
        k10.aux["recompute"], grad_h1b,
        kernel_name=traffic.K_GEMM, ledger=ledger,
    )

    k9a = gemm_rmsnorm_backward(
        grad_za, weights.w_gate_up, tape.pre_norm_a, tape.inv_rms_a,
        weights.gamma_ffn, s_a,
        grad_in=grad_h1b, trans_b=True, **kw,
    )
    grad_h1a = k9a.main
    w_gu_grad = run_gemm(
        _problem(
            k9a.aux["normed"], grad_za, trans_a=True,
            tile_shape=config.tile_shape,
            reduction_tile_n=config.reduction_tile_n,
            precision=config.precision,
        ),
        k9a.aux["normed"], grad_za,
        kernel_name=traffic.K_GEMM, ledger=ledger,
    )
    gamma_ffn_grad = reduce_row_partials(k9a.aux["gamma_grad"], ledger=ledger)

    grad_x = run_gemm(
        _problem(
            grad_h1a, weights.w_out, trans_b=True,
            tile_shape=config.tile_shape,
            reduction_tile_n=config.reduction_tile_n,
            precision=config.precision,
        ),
        grad_h1a, weights.w_out,
        kernel_name=traffic.K_GEMM, ledger=ledger,
    )
    w_out_grad = run_gemm(
        _problem(
            tape.x, grad_h1a, trans_a=True,
            tile_shape=config.tile_shape,
            reduction_tile_n=config.reduction_tile_n,
            precision=config.precision,
        ),
        tape.x, grad_h1a,
        kernel_name=traffic.K_GEMM, ledger=ledger,
    )

    return LayerGrads(
        x=grad_x.main,
        z=grad_h1a,
        w_out=w_out_grad.main,
        gamma_ffn=gamma_ffn_grad,
        w_gate_up=w_gu_grad.main,
        w_down=w_down_grad.main,
        gamma_qkv=gamma_qkv_grad,
        w_qkv=w_qkv_grad.main,
        ledger=ledger,
    )


# ---------------------------------------------------------------------------
# lm-head pipeline


@dataclass
class LmHeadResult:
    losses: Vector
    mean_loss: float
    lse: Vector
    target: Vector
    pre_norm: DenseMatrix
    inv_rms: Vector
    logits: Optional[DenseMatrix]
    ledger: TrafficLedger


def lm_head_forward(
    a: DenseMatrix,
    b: DenseMatrix,
    z: DenseMatrix,
    gamma: Vector,
    w_vocab: DenseMatrix,
    labels: np.ndarray,
    *,
    config: PipelineConfig,
    store_logits: bool = False,
) -> LmHeadResult:
    """Final projection + residual + norm + vocabulary GEMM + loss pieces.

    Five launches; the vocabulary-width logits live only inside tiles of
    the fourth unless store_logits is set.
    """
    ledger = TrafficLedger()
    k4 = gemm_residual_partial_rms(
        a, b, z, gamma,
        tile_shape=config.tile_shape,
        reduction_tile_n=config.reduction_tile_n,
        precision=config.precision,
        ledger=ledger,
    )
    r = finalize_rms(k4.aux["sumsq"], config.eps, ledger=ledger)
    k8 = gemm_rms_partial_xent(
        k4.main, w_vocab, r, labels,
        store_logits=store_logits,
        tile_shape=config.tile_shape,
        reduction_tile_n=config.reduction_tile_n,
        precision=config.precision,
        ledger=ledger,
    )
    lse = combine_lse(k8.aux["lse"], ledger=ledger)
    losses, mean_loss = cross_entropy_finalize(k8.aux["target"], lse, ledger=ledger)
    return LmHeadResult(
        losses=losses,
        mean_loss=mean_loss,
        lse=lse,
        target=k8.aux["target"],
        pre_norm=k4.aux["pre_norm"],
        inv_rms=r,
        logits=k8.main,
        ledger=ledger,
    )
