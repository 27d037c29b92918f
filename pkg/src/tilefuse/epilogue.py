"""Composable per-tile epilogue programs.

An epilogue program is an ordered list of primitives applied to each output
tile of the mainloop while the accumulator is still resident.  Primitives are
pure per tile: they may read side operands sliced to the tile's footprint,
transform the running tile values, and emit stores (auxiliary tiles, partial
blocks, gathered scalars), but they never see values produced for any other
tile coordinate.

Column geometry is tracked through the program as an exact rational width
factor.  A primitive that halves the tile (gated activation) or doubles it
(its backward) changes the factor for every later step, and every side
operand is addressed in the scaled coordinate system of the step that reads
it.  All factor arithmetic uses Fraction so validation is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, PairingError, ProgramError
from .tensors import PrecisionMode

# ---------------------------------------------------------------------------
# operand and store descriptors


class OperandKind(Enum):
    """How a side operand is sliced for a tile."""

    TILE = "tile"        # full matrix, sliced to the tile footprint
    ROW_VEC = "row_vec"  # length scales with output columns, sliced by column
    COL_VEC = "col_vec"  # length M, sliced by tile rows
    LABELS = "labels"    # integer column indices, length M, sliced by rows


class StoreKind(Enum):
    TILE = "tile"
    ROW_SUM = "row_sum"    # row-blocked partial reductions over columns
    COL_SUM = "col_sum"    # per-tile-row partial reductions over rows
    ROW_PAIR = "row_pair"  # row-blocked (max, scaled-sum) streaming pairs
    GATHER = "gather"      # one scalar per row, picked by label


@dataclass(frozen=True)
class OperandSpec:
    """A named side input required by a primitive.

    ``factor`` is the operand's column scale relative to the tile width at
    the step that reads it; the program resolves it to an absolute scale
    relative to the GEMM output width.
    """

    name: str
    kind: OperandKind
    factor: Fraction = Fraction(1)
    optional: bool = False


@dataclass(frozen=True)
class StoreSpec:
    """A named output emitted by a primitive."""

    name: str
    kind: StoreKind
    factor: Fraction = Fraction(1)


@dataclass(frozen=True)
class BoundOperand:
    """An operand spec with its program-absolute column factor."""

    name: str
    kind: OperandKind
    factor: Fraction
    optional: bool


@dataclass(frozen=True)
class BoundStore:
    name: str
    kind: StoreKind
    factor: Fraction


# ---------------------------------------------------------------------------
# partial layouts and slots


@dataclass(frozen=True)
class RowBlock:
    """One contiguous column range owned by a single reduction block."""

    block_id: int
    start: int
    stop: int

    @property
    def width(self) -> int:
        return self.stop - self.start


def row_block_layout(n: int, tile_n: int, reduction_tile_n: int) -> list[RowBlock]:
    """Column blocking for row-directed partials.

    Each mainloop tile column is sub-blocked into runs of at most
    ``reduction_tile_n`` columns, so a tile can flush its partials without
    coordinating with neighbours.  Block ids ascend with column position.
    """
    if tile_n <= 0 or reduction_tile_n <= 0:
        raise ConfigError("tile and reduction block widths must be positive")
    if n <= 0:
        raise DimensionError(f"cannot block a non-positive width {n}")
    blocks: list[RowBlock] = []
    col = 0
    while col < n:
        tile_stop = min(col + tile_n, n)
        start = col
        while start < tile_stop:
            stop = min(start + reduction_tile_n, tile_stop)
            blocks.append(RowBlock(len(blocks), start, stop))
            start = stop
        col = tile_stop
    return blocks


@dataclass
class PartialSlot:
    """Disjoint partial-result storage flushed by tiles and combined later.

    ``data`` layout by kind:
      row_sum: (m, n_blocks) raw block sums
      row_pair: (m, n_blocks, 2) streaming (max, scaled sum) pairs
      col_sum: (n_blocks, n) per-tile-row column sums
      gather: (m,) one value per row
    ``counts`` holds the element count each block reduced over, so finalizers
    never need the original blocking parameters.
    """

    kind: StoreKind
    data: np.ndarray
    counts: np.ndarray
    precision: PrecisionMode

    @property
    def n_blocks(self) -> int:
        return len(self.counts)

    def freeze(self) -> "PartialSlot":
        self.data.setflags(write=False)
        self.counts.setflags(write=False)
        return self


# ---------------------------------------------------------------------------
# primitive base


class Primitive:
    """Base class for epilogue steps.

    Subclasses declare their side operands and stores, whether they change
    the running tile width, and whether they require pair-aligned tiles.
    ``apply`` receives a tile context (engine-provided) and the running tile
    values, and returns the (possibly reshaped) running tile.
    """

    #: multiplier applied to the running width by this step
    width_factor: Fraction = Fraction(1)
    #: True when the step consumes adjacent column pairs of the running tile
    needs_pair_alignment: bool = False
    #: True when the step emits partial blocks (restricted to unscaled width)
    emits_partials: bool = False

    def operand_specs(self) -> tuple[OperandSpec, ...]:
        return ()

    def store_specs(self) -> tuple[StoreSpec, ...]:
        return ()

    def apply(self, ctx, tile: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


# ---------------------------------------------------------------------------
# elementwise modifiers


class RowVecMul(Primitive):
    """Multiply every tile row by a broadcast row vector (columnwise gains)."""

    def __init__(self, operand: str):
        self.operand = operand

    def operand_specs(self):
        return (OperandSpec(self.operand, OperandKind.ROW_VEC),)

    def apply(self, ctx, tile):
        return tile * ctx.load_row_vec(self.operand)[None, :]

    def __repr__(self):
        return f"RowVecMul({self.operand!r})"


class RowScale(Primitive):
    """Multiply every tile column by a per-row scale (e.g. inverse RMS)."""

    def __init__(self, operand: str):
        self.operand = operand

    def operand_specs(self):
        return (OperandSpec(self.operand, OperandKind.COL_VEC),)

    def apply(self, ctx, tile):
        return tile * ctx.load_col_vec(self.operand)[:, None]

    def __repr__(self):
        return f"RowScale({self.operand!r})"


class ResidualAdd(Primitive):
    """Add a tile sliced from a matching full matrix (skip connections)."""

    def __init__(self, operand: str):
        self.operand = operand

    def operand_specs(self):
        return (OperandSpec(self.operand, OperandKind.TILE),)

    def apply(self, ctx, tile):
        return tile + ctx.load_tile(self.operand)

    def __repr__(self):
        return f"ResidualAdd({self.operand!r})"


class AuxTileStore(Primitive):
    """Snapshot the running tile to a named full-size auxiliary output.

    The snapshot is quantized to the problem's storage precision on the way
    out; the running tile itself stays at accumulator precision.  Reading an
    auxiliary matrix back happens through tile operands of later launches,
    there is no separate load step.
    """

    def __init__(self, name: str):
        self.name = name

    def store_specs(self):
        return (StoreSpec(self.name, StoreKind.TILE),)

    def apply(self, ctx, tile):
        ctx.store_tile(self.name, tile)
        return tile

    def __repr__(self):
        return f"AuxTileStore({self.name!r})"


# ---------------------------------------------------------------------------
# partial emitters (all restricted to unscaled tile width)


class PartialSumSq(Primitive):
    """Flush row-blocked sums of squares of the running tile."""

    emits_partials = True

    def __init__(self, name: str = "sumsq"):
        self.name = name

    def store_specs(self):
        return (StoreSpec(self.name, StoreKind.ROW_SUM),)

    def apply(self, ctx, tile):
        for block, cols in ctx.row_blocks():
            piece = tile[:, cols]
            ctx.store_row_sum(self.name, block, np.sum(piece * piece, axis=1))
        return tile

    def __repr__(self):
        return f"PartialSumSq({self.name!r})"


class PartialRowDot(Primitive):
    """Flush row-blocked dot products of the running tile with an operand."""

    emits_partials = True

    def __init__(self, operand: str, name: str = "rowdot"):
        self.operand = operand
        self.name = name

    def operand_specs(self):
        return (OperandSpec(self.operand, OperandKind.TILE),)

    def store_specs(self):
        return (StoreSpec(self.name, StoreKind.ROW_SUM),)

    def apply(self, ctx, tile):
        other = ctx.load_tile(self.operand)
        for block, cols in ctx.row_blocks():
            ctx.store_row_sum(self.name, block, np.sum(tile[:, cols] * other[:, cols], axis=1))
        return tile

    def __repr__(self):
        return f"PartialRowDot({self.operand!r}, {self.name!r})"


class PartialColSum(Primitive):
    """Flush one per-tile-row block of column sums of the running tile."""

    emits_partials = True

    def __init__(self, name: str = "colsum"):
        self.name = name

    def store_specs(self):
        return (StoreSpec(self.name, StoreKind.COL_SUM),)

    def apply(self, ctx, tile):
        ctx.store_col_sum(self.name, np.sum(tile, axis=0))
        return tile

    def __repr__(self):
        return f"PartialColSum({self.name!r})"


class OnlineLse(Primitive):
    """Stream row-blocked (max, scaled-sum) pairs for a later logsumexp.

    Within each block the columns are folded in ascending order with the
    classic rescaling update, so a block's pair equals the pair computed by
    a one-shot reduction to within roundoff of that exact order.
    """

    emits_partials = True

    def __init__(self, name: str = "lse"):
        self.name = name

    def store_specs(self):
        return (StoreSpec(self.name, StoreKind.ROW_PAIR),)

    def apply(self, ctx, tile):
        for block, cols in ctx.row_blocks():
            piece = tile[:, cols]
            m = np.full(piece.shape[0], -np.inf, dtype=piece.dtype)
            s = np.zeros(piece.shape[0], dtype=piece.dtype)
            for j in range(piece.shape[1]):
                v = piece[:, j]
                m_new = np.maximum(m, v)
                # exp(-inf - -inf) is nan; an empty running max contributes 0
                scale = np.where(np.isneginf(m), 0.0, np.exp(m - m_new))
                s = s * scale + np.exp(v - m_new)
                m = m_new
            ctx.store_row_pair(self.name, block, m, s)
        return tile

    def __repr__(self):
        return f"OnlineLse({self.name!r})"


class TargetGather(Primitive):
    """Pick one running-tile value per row, addressed by integer labels.

    Rows whose label falls outside the tile's column range are untouched;
    over a full launch every in-range label is visited exactly once.
    """

    emits_partials = True

    def __init__(self, labels: str = "labels", name: str = "target"):
        self.labels = labels
        self.name = name

    def operand_specs(self):
        return (OperandSpec(self.labels, OperandKind.LABELS),)

    def store_specs(self):
        return (StoreSpec(self.name, StoreKind.GATHER),)

    def apply(self, ctx, tile):
        labels = ctx.load_labels(self.labels)
        local = labels - ctx.col0
        hit = (local >= 0) & (local < tile.shape[1])
        rows = np.nonzero(hit)[0]
        if rows.size:
            ctx.store_gather(self.name, rows, tile[rows, local[rows]])
        return tile

    def __repr__(self):
        return f"TargetGather({self.labels!r}, {self.name!r})"


# ---------------------------------------------------------------------------
# pairwise (width-changing) steps


class PairwiseRope(Primitive):
    """Rotate adjacent column pairs by per-position angles from cos/sin tables.

    Tables are stored at full output width with each angle duplicated across
    its pair, so a tile reads exactly its own column range.  Lane convention
    for pair (2k, 2k+1):

        out_even = x_even * cos_even - x_odd * sin_even
        out_odd  = x_even * sin_odd  + x_odd * cos_odd
    """

    needs_pair_alignment = True

    def __init__(self, cos: str = "cos", sin: str = "sin", backward: bool = False):
        self.cos = cos
        self.sin = sin
        self.backward = backward

    def operand_specs(self):
        return (
            OperandSpec(self.cos, OperandKind.TILE),
            OperandSpec(self.sin, OperandKind.TILE),
        )

    def apply(self, ctx, tile):
        cos = ctx.load_tile(self.cos)
        sin = ctx.load_tile(self.sin)
        if self.backward:
            sin = -sin
        x0 = tile[:, 0::2]
        x1 = tile[:, 1::2]
        out = np.empty_like(tile)
        out[:, 0::2] = x0 * cos[:, 0::2] - x1 * sin[:, 0::2]
        out[:, 1::2] = x0 * sin[:, 1::2] + x1 * cos[:, 1::2]
        return out

    def __repr__(self):
        return f"PairwiseRope({self.cos!r}, {self.sin!r}, backward={self.backward})"


class PairwiseSwiglu(Primitive):
    """Gated activation over interleaved (gate, up) column pairs; halves width.

    Pair (2k, 2k+1) of the running tile produces output column k:

        out_k = silu(gate) * up = gate * sigmoid(gate) * up
    """

    width_factor = Fraction(1, 2)
    needs_pair_alignment = True

    def apply(self, ctx, tile):
        gate = tile[:, 0::2]
        up = tile[:, 1::2]
        return gate * _sigmoid(gate) * up

    def __repr__(self):
        return "PairwiseSwiglu()"


class PairwiseSwigluBackward(Primitive):
    """Backward of the gated activation; doubles width.

    The running tile holds the downstream gradient at activation width; the
    pre-activation operand is read at twice the running width.  Emits the
    recomputed activation output as an auxiliary tile (it is not stored by
    the forward, recomputing it here is what makes the weight-gradient GEMM
    possible without an extra save) and row-blocked partials of
    <preact, grad_preact>, which later finalization turns into the row
    statistic of the preceding normalization backward.
    """

    width_factor = Fraction(2)
    emits_partials = True

    def __init__(self, preact: str, recompute: str = "recompute", name: str = "rowdot"):
        self.preact = preact
        self.recompute = recompute
        self.name = name

    def operand_specs(self):
        return (OperandSpec(self.preact, OperandKind.TILE, Fraction(2)),)

    def store_specs(self):
        return (
            StoreSpec(self.recompute, StoreKind.TILE),
            StoreSpec(self.name, StoreKind.ROW_SUM, Fraction(2)),
        )

    def apply(self, ctx, tile):
        z = ctx.load_tile(self.preact)
        gate = z[:, 0::2]
        up = z[:, 1::2]
        sig = _sigmoid(gate)
        silu = gate * sig
        ctx.store_tile(self.recompute, silu * up)
        grad_up = tile * silu
        grad_gate = tile * up * (sig + silu * (1.0 - sig))
        out = np.empty((tile.shape[0], tile.shape[1] * 2), dtype=tile.dtype)
        out[:, 0::2] = grad_gate
        out[:, 1::2] = grad_up
        for block, cols in ctx.row_blocks(factor=Fraction(2)):
            ctx.store_row_sum(self.name, block, np.sum(z[:, cols] * out[:, cols], axis=1))
        return out

    def __repr__(self):
        return f"PairwiseSwigluBackward({self.preact!r})"


# ---------------------------------------------------------------------------
# fused normalization backward


class RmsNormBackwardLocal(Primitive):
    """Per-tile body of the normalization backward, given precomputed row stats.

    With the running tile D holding the gradient at the normalization output,
    pre-norm values c, inverse-RMS r, gains gamma, and the row statistic
    s = (1/d) * <D * gamma, c * r> supplied as operands:

        c_n   = c * r
        out   = (D * gamma - c_n * s) * r   (+ O_in when accumulating)
        c_out = c_n * gamma                  (auxiliary, feeds weight grads)
        gcol  = sum_rows(D * c_n)            (per-tile-row gain-grad partials)

    Everything is local to the tile once r and s exist, which is the point:
    the only cross-tile coupling of the backward lives in two cheap row
    vectors.
    """

    emits_partials = True

    def __init__(
        self,
        pre: str,
        inv_rms: str,
        gamma: str,
        stat: str,
        accumulate: Optional[str] = None,
        normed_out: str = "normed",
        gamma_grad: str = "gamma_grad",
    ):
        self.pre = pre
        self.inv_rms = inv_rms
        self.gamma = gamma
        self.stat = stat
        self.accumulate = accumulate
        self.normed_out = normed_out
        self.gamma_grad = gamma_grad

    def operand_specs(self):
        specs = [
            OperandSpec(self.pre, OperandKind.TILE),
            OperandSpec(self.inv_rms, OperandKind.COL_VEC),
            OperandSpec(self.gamma, OperandKind.ROW_VEC),
            OperandSpec(self.stat, OperandKind.COL_VEC),
        ]
        if self.accumulate is not None:
            specs.append(OperandSpec(self.accumulate, OperandKind.TILE))
        return tuple(specs)

    def store_specs(self):
        return (
            StoreSpec(self.normed_out, StoreKind.TILE),
            StoreSpec(self.gamma_grad, StoreKind.COL_SUM),
        )

    def apply(self, ctx, tile):
        c = ctx.load_tile(self.pre)
        r = ctx.load_col_vec(self.inv_rms)[:, None]
        gamma = ctx.load_row_vec(self.gamma)[None, :]
        s = ctx.load_col_vec(self.stat)[:, None]
        c_n = c * r
        ctx.store_tile(self.normed_out, c_n * gamma)
        ctx.store_col_sum(self.gamma_grad, np.sum(tile * c_n, axis=0))
        out = (tile * gamma - c_n * s) * r
        if self.accumulate is not None:
            out = out + ctx.load_tile(self.accumulate)
        return out

    def __repr__(self):
        return (
            f"RmsNormBackwardLocal({self.pre!r}, {self.inv_rms!r}, "
            f"{self.gamma!r}, {self.stat!r}, accumulate={self.accumulate!r})"
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # computed via exp(-|x|) so neither branch overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# the program


@dataclass(frozen=True)
class ProgramStep:
    primitive: Primitive
    entry_factor: Fraction  # running width factor when this step executes


class EpilogueProgram:
    """Validated, ordered sequence of epilogue primitives.

    Width bookkeeping, operand factor resolution, and structural rules are
    all checked at construction so a malformed program can never reach the
    mainloop.  Structural rules:

      * partial-emitting steps must run at unscaled width (factor 1), where
        tile columns line up with the reduction block layout;
      * operand and store names must be unique across the program;
      * pairwise steps require an even-width, even-offset launch geometry,
        checked per launch by the engine via `check_pairing`.
    """

    def __init__(self, primitives: Sequence[Primitive] = ()):
        steps: list[ProgramStep] = []
        factor = Fraction(1)
        operands: dict[str, BoundOperand] = {}
        stores: dict[str, BoundStore] = {}
        for prim in primitives:
            if not isinstance(prim, Primitive):
                raise ProgramError(f"not an epilogue primitive: {prim!r}")
            if prim.emits_partials and factor != 1:
                raise ProgramError(
                    f"{prim!r} emits partial blocks and must run at unscaled "
                    f"width, but the running factor here is {factor}"
                )
            steps.append(ProgramStep(prim, factor))
            for spec in prim.operand_specs():
                bound = BoundOperand(spec.name, spec.kind, factor * spec.factor, spec.optional)
                prev = operands.get(spec.name)
                if prev is not None:
                    raise ProgramError(f"operand name {spec.name!r} bound twice")
                if spec.name in stores:
                    raise ProgramError(
                        f"{spec.name!r} is both an operand and a store; "
                        f"auxiliary outputs become inputs of later launches, "
                        f"not of their own program"
                    )
                operands[spec.name] = bound
            for spec in prim.store_specs():
                if spec.name in stores or spec.name in operands:
                    raise ProgramError(f"store name {spec.name!r} already in use")
                stores[spec.name] = BoundStore(spec.name, spec.kind, factor * spec.factor)
            factor = factor * prim.width_factor
        self.steps: tuple[ProgramStep, ...] = tuple(steps)
        self.operands: dict[str, BoundOperand] = operands
        self.stores: dict[str, BoundStore] = stores
        self.out_factor: Fraction = factor

    def __len__(self) -> int:
        return len(self.steps)

    def __repr__(self) -> str:
        inner = ", ".join(repr(s.primitive) for s in self.steps)
        return f"EpilogueProgram([{inner}])"

    def scaled_width(self, n: int) -> int:
        """Output column count for a launch of GEMM width n."""
        w = Fraction(n) * self.out_factor
        if w.denominator != 1:
            raise PairingError(
                f"program scales width by {self.out_factor} but n={n} does "
                f"not divide evenly"
            )
        return int(w)

    def check_pairing(self, tile_cols: Sequence[tuple[int, int]]) -> None:
        """Validate tile-column geometry against every pairwise step.

        ``tile_cols`` lists (col0, width) in GEMM coordinates for each tile
        column of the launch.  A pairwise step executing at entry factor f
        sees offsets and widths scaled by f; both must be even integers or
        a pair would straddle two tiles.
        """
        for step in self.steps:
            if not step.primitive.needs_pair_alignment:
                continue
            f = step.entry_factor
            for col0, width in tile_cols:
                off = Fraction(col0) * f
                w = Fraction(width) * f
                if off.denominator != 1 or w.denominator != 1 or off % 2 or w % 2:
                    raise PairingError(
                        f"{step.primitive!r} needs even tile offsets and "
                        f"widths at factor {f}; got col0={col0} width={width}"
                    )
