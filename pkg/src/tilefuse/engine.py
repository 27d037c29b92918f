"""Tiled GEMM mainloop with fused epilogue execution.

The engine partitions the output into tiles, contracts the full K extent
per tile from slices of the inputs, runs the epilogue program on each tile
while it is register-resident (modeled: a private ndarray), and quantizes
values to the declared storage precision only at global-store boundaries.
Tiles are mutually independent; an explicit tile order can be supplied to
demonstrate that results do not depend on it.

Each launch produces a traffic record: reads are each bound operand priced
once at its own storage width, writes are the actual store events (main and
auxiliary tiles at the problem width, partial blocks and gathers at the
partial width).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .epilogue import (
    BoundOperand,
    EpilogueProgram,
    OperandKind,
    PartialSlot,
    RowBlock,
    StoreKind,
    row_block_layout,
)
from .errors import (
    BindingError,
    ConfigError,
    DimensionError,
    LabelError,
    ProgramError,
)
from .tensors import (
    DenseMatrix,
    PrecisionMode,
    TileCoord,
    TileShape,
    Vector,
    quantize,
    stat_mode,
    tile_coords,
)
from .traffic import LABEL_BYTES, LaunchRecord, TrafficLedger

Binding = Union[DenseMatrix, Vector, np.ndarray]


@dataclass(frozen=True)
class GemmProblem:
    """Shape, layout, tiling, and precision of one launch."""

    m: int
    n: int
    k: int
    trans_a: bool = False
    trans_b: bool = False
    tile_shape: TileShape = TileShape(128, 128)
    reduction_tile_n: int = 128
    precision: PrecisionMode = PrecisionMode.EXACT64

    def __post_init__(self):
        if min(self.m, self.n, self.k) <= 0:
            raise DimensionError(
                f"problem dims must be positive, got {self.m}x{self.n}x{self.k}"
            )
        if min(self.tile_shape.rows, self.tile_shape.cols) <= 0:
            raise ConfigError(f"bad tile shape {self.tile_shape}")
        if self.reduction_tile_n <= 0:
            raise ConfigError("reduction_tile_n must be positive")


@dataclass
class KernelResult:
    """Outputs of one launch: main matrix, named auxiliaries, traffic record."""

    main: Optional[DenseMatrix]
    aux: dict
    record: LaunchRecord


def _scaled_cols(col0: int, cols: int, factor: Fraction) -> tuple[int, int]:
    lo = Fraction(col0) * factor
    hi = Fraction(col0 + cols) * factor
    if lo.denominator != 1 or hi.denominator != 1:
        raise ProgramError(
            f"tile columns [{col0}, {col0 + cols}) do not scale by {factor} "
            f"to whole columns"
        )
    return int(lo), int(hi)


class _TileContext:
    """Per-tile view handed to epilogue primitives."""

    def __init__(self, launch: "_Launch", coord: TileCoord):
        self._launch = launch
        self.coord = coord
        self.row0 = coord.row0
        self.col0 = coord.col0
        self.rows = coord.rows
        self.cols = coord.cols

    def load_tile(self, name: str) -> np.ndarray:
        op, arr = self._launch.operand(name, OperandKind.TILE)
        lo, hi = _scaled_cols(self.col0, self.cols, op.factor)
        return arr[self.row0 : self.row0 + self.rows, lo:hi]

    def load_row_vec(self, name: str) -> np.ndarray:
        op, arr = self._launch.operand(name, OperandKind.ROW_VEC)
        lo, hi = _scaled_cols(self.col0, self.cols, op.factor)
        return arr[lo:hi]

    def load_col_vec(self, name: str) -> np.ndarray:
        _, arr = self._launch.operand(name, OperandKind.COL_VEC)
        return arr[self.row0 : self.row0 + self.rows]

    def load_labels(self, name: str) -> np.ndarray:
        _, arr = self._launch.operand(name, OperandKind.LABELS)
        return arr[self.row0 : self.row0 + self.rows]

    def row_blocks(self, factor: Fraction = Fraction(1)):
        """(global block, local column slice) pairs covering this tile."""
        return self._launch.tile_row_blocks(self.coord.j, factor)

    def store_tile(self, name: str, values: np.ndarray) -> None:
        self._launch.store_tile(self, name, values)

    def store_row_sum(self, name: str, block: RowBlock, values: np.ndarray) -> None:
        self._launch.store_row_sum(self, name, block, values)

    def store_row_pair(
        self, name: str, block: RowBlock, maxes: np.ndarray, sums: np.ndarray
    ) -> None:
        self._launch.store_row_pair(self, name, block, maxes, sums)

    def store_col_sum(self, name: str, values: np.ndarray) -> None:
        self._launch.store_col_sum(self, name, values)

    def store_gather(self, name: str, local_rows: np.ndarray, values: np.ndarray) -> None:
        self._launch.store_gather(self, name, local_rows, values)


class _Launch:
    """Mutable state of one launch (bindings, outputs, byte counters)."""

    def __init__(
        self,
        problem: GemmProblem,
        program: EpilogueProgram,
        bindings: dict[str, Binding],
        store_main: bool,
    ):
        self.problem = problem
        self.program = program
        self.acc_dtype = problem.precision.acc_dtype
        self.read_bytes = 0
        self.write_bytes = 0
        self._operands: dict[str, tuple[BoundOperand, np.ndarray]] = {}
        self._tiles = tile_coords(problem.m, problem.n, problem.tile_shape)
        self._tile_cols = self._unique_tile_cols()
        program.check_pairing(self._tile_cols)
        self.n_out = program.scaled_width(problem.n) if store_main else None

        unknown = set(bindings) - set(program.operands)
        if unknown:
            raise BindingError(f"bindings not used by the program: {sorted(unknown)}")
        for name, op in program.operands.items():
            if name not in bindings:
                raise BindingError(f"program operand {name!r} is not bound")
            self._bind(op, bindings[name])

        self._layouts: dict[Fraction, list[RowBlock]] = {}
        self._tile_block_map: dict[tuple[Fraction, int], list] = {}
        self._outputs: dict[str, np.ndarray] = {}
        self._slots: dict[str, PartialSlot] = {}
        self._gathers: dict[str, np.ndarray] = {}
        for store in program.stores.values():
            self._allocate(store)

    # -- binding ----------------------------------------------------------

    def _bind(self, op: BoundOperand, value: Binding) -> None:
        p = self.problem
        if op.kind is OperandKind.TILE:
            if not isinstance(value, DenseMatrix):
                raise BindingError(f"operand {op.name!r} must be a DenseMatrix")
            want = Fraction(p.n) * op.factor
            if want.denominator != 1:
                raise ProgramError(
                    f"operand {op.name!r} scale {op.factor} does not divide n={p.n}"
                )
            if value.shape != (p.m, int(want)):
                raise DimensionError(
                    f"operand {op.name!r} has shape {value.shape}, "
                    f"expected {(p.m, int(want))}"
                )
            arr = value.data.astype(self.acc_dtype, copy=False)
            self.read_bytes += value.data.size * value.precision.storage_bytes
        elif op.kind is OperandKind.ROW_VEC:
            if not isinstance(value, Vector):
                raise BindingError(f"operand {op.name!r} must be a Vector")
            want = Fraction(p.n) * op.factor
            if want.denominator != 1 or len(value) != int(want):
                raise DimensionError(
                    f"operand {op.name!r} has length {len(value)}, expected {want}"
                )
            arr = value.data.astype(self.acc_dtype, copy=False)
            self.read_bytes += len(value) * value.precision.storage_bytes
        elif op.kind is OperandKind.COL_VEC:
            if not isinstance(value, Vector):
                raise BindingError(f"operand {op.name!r} must be a Vector")
            if len(value) != p.m:
                raise DimensionError(
                    f"operand {op.name!r} has length {len(value)}, expected {p.m}"
                )
            arr = value.data.astype(self.acc_dtype, copy=False)
            self.read_bytes += len(value) * value.precision.storage_bytes
        elif op.kind is OperandKind.LABELS:
            arr = np.asarray(value)
            if arr.ndim != 1 or arr.shape[0] != p.m:
                raise DimensionError(
                    f"labels {op.name!r} must have shape ({p.m},), got {arr.shape}"
                )
            if not np.issubdtype(arr.dtype, np.integer):
                raise LabelError(f"labels {op.name!r} must be integers")
            if arr.size and (arr.min() < 0 or arr.max() >= p.n):
                raise LabelError(
                    f"labels {op.name!r} must lie in [0, {p.n}), "
                    f"got range [{arr.min()}, {arr.max()}]"
                )
            arr = arr.astype(np.int64, copy=False)
            self.read_bytes += p.m * LABEL_BYTES
        else:  # pragma: no cover - enum is closed
            raise ProgramError(f"unhandled operand kind {op.kind}")
        self._operands[op.name] = (op, arr)

    def operand(self, name: str, kind: OperandKind) -> tuple[BoundOperand, np.ndarray]:
        op, arr = self._operands[name]
        if op.kind is not kind:
            raise ProgramError(
                f"operand {name!r} is bound as {op.kind}, primitive wants {kind}"
            )
        return op, arr

    # -- output allocation --------------------------------------------------

    def _layout(self, factor: Fraction) -> list[RowBlock]:
        layout = self._layouts.get(factor)
        if layout is None:
            if factor.denominator != 1:
                raise ProgramError(
                    f"partial stores need an integer width scale, got {factor}"
                )
            scale = factor.numerator
            blocks: list[RowBlock] = []
            per_tile: list[list] = []
            for col0, width in self._tile_cols:
                lo = col0 * scale
                tile_blocks = []
                start = lo
                stop_tile = (col0 + width) * scale
                while start < stop_tile:
                    stop = min(start + self.problem.reduction_tile_n, stop_tile)
                    blk = RowBlock(len(blocks), start, stop)
                    blocks.append(blk)
                    tile_blocks.append((blk, slice(start - lo, stop - lo)))
                    start = stop
                per_tile.append(tile_blocks)
            self._layouts[factor] = blocks
            for j, tb in enumerate(per_tile):
                self._tile_block_map[(factor, j)] = tb
            layout = blocks
        return layout

    def tile_row_blocks(self, tile_j: int, factor: Fraction):
        self._layout(factor)
        return self._tile_block_map[(factor, tile_j)]

    def _allocate(self, store) -> None:
        p = self.problem
        if store.kind is StoreKind.TILE:
            want = Fraction(p.n) * store.factor
            if want.denominator != 1:
                raise ProgramError(
                    f"store {store.name!r} scale {store.factor} does not "
                    f"divide n={p.n}"
                )
            self._outputs[store.name] = np.zeros((p.m, int(want)), dtype=np.float64)
        elif store.kind in (StoreKind.ROW_SUM, StoreKind.ROW_PAIR):
            layout = self._layout(store.factor)
            counts = np.array([b.width for b in layout], dtype=np.int64)
            if store.kind is StoreKind.ROW_SUM:
                data = np.zeros((p.m, len(layout)), dtype=np.float64)
            else:
                data = np.zeros((p.m, len(layout), 2), dtype=np.float64)
                data[:, :, 0] = -np.inf
            self._slots[store.name] = PartialSlot(store.kind, data, counts, p.precision)
        elif store.kind is StoreKind.COL_SUM:
            n_rows = len({c.i for c in self._tiles})
            counts = np.zeros(n_rows, dtype=np.int64)
            for c in self._tiles:
                counts[c.i] = c.rows
            want = Fraction(p.n) * store.factor
            if want.denominator != 1:
                raise ProgramError(
                    f"store {store.name!r} scale {store.factor} does not "
                    f"divide n={p.n}"
                )
            data = np.zeros((n_rows, int(want)), dtype=np.float64)
            self._slots[store.name] = PartialSlot(store.kind, data, counts, p.precision)
        elif store.kind is StoreKind.GATHER:
            self._gathers[store.name] = np.full(p.m, np.nan, dtype=np.float64)
        else:  # pragma: no cover - enum is closed
            raise ProgramError(f"unhandled store kind {store.kind}")

    def _unique_tile_cols(self) -> list[tuple[int, int]]:
        cols: list[tuple[int, int]] = []
        for c in self._tiles:
            if c.i == 0:
                cols.append((c.col0, c.cols))
        return cols

    # -- store events ---------------------------------------------------------

    def store_tile(self, ctx: _TileContext, name: str, values: np.ndarray) -> None:
        store = self.program.stores[name]
        target = self._outputs[name]
        lo, hi = _scaled_cols(ctx.col0, ctx.cols, store.factor)
        q = quantize(np.asarray(values, dtype=np.float64), self.problem.precision)
        target[ctx.row0 : ctx.row0 + ctx.rows, lo:hi] = q
        self.write_bytes += q.size * self.problem.precision.storage_bytes

    def store_row_sum(
        self, ctx: _TileContext, name: str, block: RowBlock, values: np.ndarray
    ) -> None:
        slot = self._slots[name]
        slot.data[ctx.row0 : ctx.row0 + ctx.rows, block.block_id] = values
        self.write_bytes += ctx.rows * self.problem.precision.partial_bytes

    def store_row_pair(
        self,
        ctx: _TileContext,
        name: str,
        block: RowBlock,
        maxes: np.ndarray,
        sums: np.ndarray,
    ) -> None:
        slot = self._slots[name]
        rows = slice(ctx.row0, ctx.row0 + ctx.rows)
        slot.data[rows, block.block_id, 0] = maxes
        slot.data[rows, block.block_id, 1] = sums
        self.write_bytes += 2 * ctx.rows * self.problem.precision.partial_bytes

    def store_col_sum(self, ctx: _TileContext, name: str, values: np.ndarray) -> None:
        slot = self._slots[name]
        store = self.program.stores[name]
        lo, hi = _scaled_cols(ctx.col0, ctx.cols, store.factor)
        slot.data[ctx.coord.i, lo:hi] = values
        self.write_bytes += (hi - lo) * self.problem.precision.partial_bytes

    def store_gather(
        self, ctx: _TileContext, name: str, local_rows: np.ndarray, values: np.ndarray
    ) -> None:
        target = self._gathers[name]
        target[ctx.row0 + local_rows] = values
        self.write_bytes += local_rows.size * self.problem.precision.partial_bytes


def run_gemm(
    problem: GemmProblem,
    a: DenseMatrix,
    b: DenseMatrix,
    program: Optional[EpilogueProgram] = None,
    bindings: Optional[dict[str, Binding]] = None,
    *,
    kernel_name: str = "gemm",
    ledger: Optional[TrafficLedger] = None,
    tile_order: Optional[Sequence[tuple[int, int]]] = None,
    store_main: bool = True,
) -> KernelResult:
    """Run one tiled GEMM launch with an optional fused epilogue.

    ``a`` is (m, k) or (k, m) under ``trans_a``; ``b`` is (k, n) or (n, k)
    under ``trans_b``.  ``bindings`` supplies every side operand the program
    declares, keyed by operand name.  ``tile_order`` optionally permutes
    tile execution; results are identical for any valid order because tiles
    only ever touch disjoint state.
    """
    if program is None:
        program = EpilogueProgram(())
    if bindings is None:
        bindings = {}
    p = problem

    want_a = (p.k, p.m) if p.trans_a else (p.m, p.k)
    want_b = (p.n, p.k) if p.trans_b else (p.k, p.n)
    if not isinstance(a, DenseMatrix) or not isinstance(b, DenseMatrix):
        raise BindingError("a and b must be DenseMatrix")
    if a.shape != want_a:
        raise DimensionError(f"a has shape {a.shape}, problem wants {want_a}")
    if b.shape != want_b:
        raise DimensionError(f"b has shape {b.shape}, problem wants {want_b}")

    launch = _Launch(p, program, bindings, store_main)
    launch.read_bytes += a.data.size * a.precision.storage_bytes
    launch.read_bytes += b.data.size * b.precision.storage_bytes

    a_acc = a.data.astype(p.precision.acc_dtype, copy=False)
    b_acc = b.data.astype(p.precision.acc_dtype, copy=False)

    tiles = launch._tiles
    order = list(range(len(tiles)))
    if tile_order is not None:
        index = {(c.i, c.j): t for t, c in enumerate(tiles)}
        if sorted(tuple(x) for x in tile_order) != sorted(index):
            raise ConfigError(
                "tile_order must be a permutation of the launch's (i, j) grid"
            )
        order = [index[tuple(x)] for x in tile_order]

    main_arr = None
    if store_main:
        main_arr = np.zeros((p.m, launch.n_out), dtype=np.float64)

    for t in order:
        coord = tiles[t]
        r0, r1 = coord.row0, coord.row0 + coord.rows
        c0, c1 = coord.col0, coord.col0 + coord.cols
        a_sl = a_acc[:, r0:r1].T if p.trans_a else a_acc[r0:r1, :]
        b_sl = b_acc[c0:c1, :].T if p.trans_b else b_acc[:, c0:c1]
        tile = a_sl @ b_sl
        ctx = _TileContext(launch, coord)
        for step in program.steps:
            tile = step.primitive.apply(ctx, tile)
        if store_main:
            lo, hi = _scaled_cols(coord.col0, coord.cols, program.out_factor)
            main_arr[r0:r1, lo:hi] = quantize(
                np.asarray(tile, dtype=np.float64), p.precision
            )
            launch.write_bytes += tile.size * p.precision.storage_bytes

    main = None
    if store_main:
        main = DenseMatrix(main_arr, p.precision)

    aux: dict = {}
    for name, arr in launch._outputs.items():
        aux[name] = DenseMatrix(arr, p.precision)
    for name, slot in launch._slots.items():
        aux[name] = slot.freeze()
    for name, arr in launch._gathers.items():
        aux[name] = Vector(arr, stat_mode(p.precision))

    record = LaunchRecord(kernel_name, launch.read_bytes, launch.write_bytes)
    if ledger is not None:
        ledger.add(record)
    return KernelResult(main=main, aux=aux, record=record)


def run_gemm_trans(
    problem: GemmProblem,
    a: DenseMatrix,
    b: DenseMatrix,
    program: Optional[EpilogueProgram] = None,
    bindings: Optional[dict[str, Binding]] = None,
    **kwargs,
) -> KernelResult:
    """Run with the B operand interpreted as transposed (stored (n, k))."""
    return run_gemm(
        replace(problem, trans_b=True), a, b, program, bindings, **kwargs
    )
