"""Finalizers that turn partial blocks into row statistics.

These are the cheap second passes of the split-reduction scheme: they read
only the blocked partials (a few words per row), never the activations the
partials summarize.  Blocks are combined in ascending block order so every
run of the same blocking is bit-identical; different blockings agree to
reduction roundoff, which the block-invariance tests bound.

Compute happens at the partial precision of the slot (binary32 in the
simulated modes, binary64 in exact mode) and results are stored as row
statistics at that same width.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .epilogue import PartialSlot, StoreKind
from .errors import (
    ConfigError,
    DegenerateError,
    DimensionError,
    MissingGatherError,
)
from .tensors import Vector, stat_mode
from .traffic import (
    R_COMBINE_LSE,
    R_FINALIZE_RMS,
    R_FINALIZE_ROWDOT,
    R_REDUCE_ROWVEC,
    R_XENT_FINALIZE,
    TrafficLedger,
)


def _expect_kind(slot: PartialSlot, kind: StoreKind, who: str) -> None:
    if not isinstance(slot, PartialSlot):
        raise ConfigError(f"{who} needs a PartialSlot, got {type(slot).__name__}")
    if slot.kind is not kind:
        raise ConfigError(f"{who} needs {kind.value} partials, got {slot.kind.value}")


def _record(ledger: Optional[TrafficLedger], name: str, slot: PartialSlot, out_len: int) -> None:
    if ledger is not None:
        pw = slot.precision.partial_bytes
        ledger.record(name, slot.data.size * pw, out_len * pw)


def _row_sum_total(slot: PartialSlot) -> np.ndarray:
    dt = slot.precision.partial_dtype
    data = slot.data.astype(dt, copy=False)
    total = np.zeros(data.shape[0], dtype=dt)
    for b in range(slot.n_blocks):
        total = total + data[:, b]
    return total


def _scalar(mode_dtype: np.dtype, value) -> np.generic:
    return mode_dtype.type(value)


def finalize_rms(
    slot: PartialSlot, eps: float = 1e-6, *, ledger: Optional[TrafficLedger] = None
) -> Vector:
    """Inverse RMS per row from blocked sums of squares.

    r = 1 / sqrt(total / d + eps) with d taken from the block counts, so the
    caller never restates the normalized width.
    """
    _expect_kind(slot, StoreKind.ROW_SUM, "finalize_rms")
    d = int(slot.counts.sum())
    if d <= 0:
        raise DegenerateError("partial blocks cover no columns")
    dt = slot.precision.partial_dtype
    total = _row_sum_total(slot)
    r = 1.0 / np.sqrt(total / _scalar(dt, d) + _scalar(dt, eps))
    _record(ledger, R_FINALIZE_RMS, slot, len(r))
    return Vector.from_array(r, stat_mode(slot.precision))


def finalize_rowdot(
    slot: PartialSlot, d: int, *, ledger: Optional[TrafficLedger] = None
) -> Vector:
    """Mean row dot product from blocked partial dots.

    ``d`` is the width of the normalization the statistic feeds, not the
    width the partials were collected over; the two differ whenever the dot
    product was relocated through a weight matrix.
    """
    _expect_kind(slot, StoreKind.ROW_SUM, "finalize_rowdot")
    if d <= 0:
        raise ConfigError(f"normalized width must be positive, got {d}")
    dt = slot.precision.partial_dtype
    total = _row_sum_total(slot) / _scalar(dt, d)
    _record(ledger, R_FINALIZE_ROWDOT, slot, len(total))
    return Vector.from_array(total, stat_mode(slot.precision))


def combine_lse(
    slot: PartialSlot, *, ledger: Optional[TrafficLedger] = None
) -> Vector:
    """Log-sum-exp per row from blocked (max, scaled sum) pairs.

    Pairs merge with the standard rescaling rule; merging is associative up
    to roundoff, so any blocking of the same values agrees to reduction
    tolerance.  A row whose blocks are all empty has no defined value and
    raises DegenerateError.
    """
    _expect_kind(slot, StoreKind.ROW_PAIR, "combine_lse")
    dt = slot.precision.partial_dtype
    data = slot.data.astype(dt, copy=False)
    m = np.full(data.shape[0], -np.inf, dtype=dt)
    s = np.zeros(data.shape[0], dtype=dt)
    zero = _scalar(dt, 0)
    for b in range(slot.n_blocks):
        mb = data[:, b, 0]
        sb = data[:, b, 1]
        m_new = np.maximum(m, mb)
        # -inf minus -inf is nan; the where() masks both empty-side cases
        with np.errstate(invalid="ignore"):
            scale_old = np.where(np.isneginf(m), zero, np.exp(m - m_new))
            scale_new = np.where(np.isneginf(mb), zero, np.exp(mb - m_new))
        s = s * scale_old + sb * scale_new
        m = m_new
    if np.isneginf(m).any():
        raise DegenerateError("some rows saw no values in any block")
    lse = m + np.log(s)
    _record(ledger, R_COMBINE_LSE, slot, len(lse))
    return Vector.from_array(lse, stat_mode(slot.precision))


def reduce_row_partials(
    slot: PartialSlot, *, ledger: Optional[TrafficLedger] = None
) -> Vector:
    """Column totals from per-tile-row partial sums (gain gradients)."""
    _expect_kind(slot, StoreKind.COL_SUM, "reduce_row_partials")
    dt = slot.precision.partial_dtype
    data = slot.data.astype(dt, copy=False)
    total = np.zeros(data.shape[1], dtype=dt)
    for b in range(data.shape[0]):
        total = total + data[b]
    _record(ledger, R_REDUCE_ROWVEC, slot, len(total))
    return Vector.from_array(total, stat_mode(slot.precision))


def cross_entropy_finalize(
    target: Vector, lse: Vector, *, ledger: Optional[TrafficLedger] = None
) -> tuple[Vector, float]:
    """Per-row losses and their mean from gathered targets and row LSEs.

    loss = lse - z_target.  A NaN in the gathered targets means some row's
    label was never visited, which is a hole in the launch, not a number.
    """
    if len(target) != len(lse):
        raise DimensionError(
            f"target and lse lengths differ: {len(target)} vs {len(lse)}"
        )
    if np.isnan(target.data).any():
        raise MissingGatherError("gathered targets contain unvisited rows")
    dt = stat_mode(lse.precision).partial_dtype
    losses = lse.data.astype(dt, copy=False) - target.data.astype(dt, copy=False)
    if ledger is not None:
        pw = stat_mode(lse.precision).partial_bytes
        ledger.record(R_XENT_FINALIZE, 2 * len(lse) * pw, len(lse) * pw)
    out = Vector.from_array(losses, stat_mode(lse.precision))
    return out, float(np.mean(losses.astype(np.float64)))
