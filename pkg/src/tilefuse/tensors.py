"""Precision-tagged dense containers and tiling helpers.

The whole package computes on float64 ndarrays, but every stored value is
constrained to be exactly representable in the tensor's declared precision:

* ``EXACT64``  - IEEE binary64, no rounding anywhere.
* ``SIM32``    - values live on the binary32 grid; accumulation in binary32.
* ``SIMBF16``  - values live on the bfloat16 grid (8-bit exponent, 7-bit
  mantissa); accumulation stays binary32 and rounding to bfloat16 happens
  only when a value crosses a global-store boundary.

Keeping float64 as the in-memory dtype makes mixing tensors trivial while
the quantize-on-store discipline reproduces the numerics of the simulated
formats.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DegenerateError, DimensionError


class PrecisionMode(enum.Enum):
    """Storage/accumulation regime for a kernel launch."""

    EXACT64 = "exact64"
    SIM32 = "sim32"
    SIMBF16 = "simbf16"

    @property
    def storage_bytes(self) -> int:
        """Modeled bytes per element at a global store boundary."""
        return {"exact64": 8, "sim32": 4, "simbf16": 2}[self.value]

    @property
    def partial_bytes(self) -> int:
        """Modeled bytes per partial-statistic element (binary32 in both
        simulated modes, binary64 when exact)."""
        return 8 if self is PrecisionMode.EXACT64 else 4

    @property
    def acc_dtype(self) -> np.dtype:
        """Accumulator dtype used inside the tiled mainloop and epilogue."""
        return np.dtype(np.float64 if self is PrecisionMode.EXACT64 else np.float32)

    @property
    def partial_dtype(self) -> np.dtype:
        """Dtype used when combining partial statistics across blocks."""
        return self.acc_dtype

    @classmethod
    def parse(cls, text: str) -> "PrecisionMode":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ConfigError(f"unknown precision mode: {text!r}") from None


def _round_to_bf16(values: np.ndarray) -> np.ndarray:
    """Round binary32 values to the nearest bfloat16, ties to even.

    Works on the binary32 bit pattern: add 0x7FFF plus the lowest kept
    mantissa bit, then truncate the low 16 bits. Non-finite inputs pass
    through unchanged.
    """
    f32 = np.ascontiguousarray(values, dtype=np.float32)
    bits = f32.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = (bits + np.uint32(0x7FFF) + lsb) & np.uint32(0xFFFF0000)
    out = rounded.view(np.float32).copy()
    keep = ~np.isfinite(f32)
    if keep.any():
        out[keep] = f32[keep]
    return out


def quantize(values, mode: PrecisionMode):
    """Project ``values`` onto the representable grid of ``mode``.

    Accepts scalars or arrays; returns the same kind, as float64. The
    operation is idempotent and rounds to nearest, ties to even. Non-finite
    values propagate unchanged.
    """
    scalar = np.isscalar(values) or np.ndim(values) == 0
    arr = np.asarray(values, dtype=np.float64)
    if mode is PrecisionMode.EXACT64:
        out = arr.copy()
    elif mode is PrecisionMode.SIM32:
        out = arr.astype(np.float32).astype(np.float64)
    else:
        out = _round_to_bf16(arr.astype(np.float32)).astype(np.float64)
    return float(np.ravel(out)[0]) if scalar else out


class TileShape(NamedTuple):
    """CTA-style output tile extent (rows, cols)."""

    rows: int
    cols: int


class TileCoord(NamedTuple):
    """One output tile: block indices plus its (possibly ragged) extent."""

    i: int
    j: int
    row0: int
    col0: int
    rows: int
    cols: int


def tile_coords(m: int, n: int, shape: TileShape) -> list[TileCoord]:
    """Enumerate output tiles in row-major block order.

    Edge tiles are clipped, never padded; the tiles partition the full
    m x n index space exactly once.
    """
    tm, tn = int(shape[0]), int(shape[1])
    if tm <= 0 or tn <= 0:
        raise ConfigError(f"tile dims must be positive, got {shape}")
    if m <= 0 or n <= 0:
        raise DimensionError(f"output dims must be positive, got {m}x{n}")
    coords = []
    for i in range((m + tm - 1) // tm):
        row0 = i * tm
        rows = min(tm, m - row0)
        for j in range((n + tn - 1) // tn):
            col0 = j * tn
            coords.append(TileCoord(i, j, row0, col0, rows, min(tn, n - col0)))
    return coords


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DenseMatrix:
    """Row-major 2-D tensor tagged with its storage precision.

    The payload is immutable; engine launches allocate fresh arrays and
    freeze them on wrap, so concurrent tile visits could never observe a
    torn write.
    """

    data: np.ndarray
    precision: PrecisionMode = PrecisionMode.EXACT64

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DimensionError(f"DenseMatrix needs a 2-D array, got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise DimensionError(f"DenseMatrix dims must be positive, got {self.data.shape}")
        _freeze(self.data)

    @classmethod
    def from_array(cls, values, precision: PrecisionMode = PrecisionMode.EXACT64) -> "DenseMatrix":
        arr = quantize(np.array(values, dtype=np.float64, order="C", ndmin=2), precision)
        return cls(_freeze(arr), precision)

    @classmethod
    def zeros(cls, rows: int, cols: int, precision: PrecisionMode = PrecisionMode.EXACT64) -> "DenseMatrix":
        return cls(_freeze(np.zeros((rows, cols))), precision)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def to_array(self) -> np.ndarray:
        return self.data.copy()


@dataclass(frozen=True)
class Vector:
    """1-D tensor tagged with its storage precision.

    Serves for both row vectors (broadcast over columns of a tile) and
    column vectors (broadcast over rows); orientation is fixed by the
    operand slot it is bound to.
    """

    data: np.ndarray
    precision: PrecisionMode = PrecisionMode.EXACT64

    def __post_init__(self):
        if self.data.ndim != 1:
            raise DimensionError(f"Vector needs a 1-D array, got ndim={self.data.ndim}")
        if self.data.shape[0] < 1:
            raise DimensionError("Vector length must be positive")
        _freeze(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_array(cls, values, precision: PrecisionMode = PrecisionMode.EXACT64) -> "Vector":
        arr = quantize(np.array(values, dtype=np.float64).reshape(-1), precision)
        return cls(_freeze(arr), precision)

    @classmethod
    def zeros(cls, length: int, precision: PrecisionMode = PrecisionMode.EXACT64) -> "Vector":
        return cls(_freeze(np.zeros(length)), precision)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    def to_array(self) -> np.ndarray:
        return self.data.copy()


def stat_mode(mode: PrecisionMode) -> PrecisionMode:
    """Storage mode for row statistics and finalized reductions.

    Simulated modes keep statistics at binary32 regardless of the activation
    width; the exact mode keeps everything at binary64.
    """
    if mode is PrecisionMode.EXACT64:
        return PrecisionMode.EXACT64
    return PrecisionMode.SIM32


def _payload(obj) -> np.ndarray:
    if isinstance(obj, (DenseMatrix, Vector)):
        return obj.data
    return np.asarray(obj, dtype=np.float64)


def rel_error(value, reference) -> float:
    """Relative Frobenius error ||value - reference||_F / ||reference||_F.

    Always evaluated in binary64 regardless of operand precision. A zero
    reference norm admits no relative scale and raises DegenerateError.
    """
    a = _payload(value).astype(np.float64, copy=False)
    b = _payload(reference).astype(np.float64, copy=False)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    ref_norm = float(np.linalg.norm(b))
    if ref_norm == 0.0:
        raise DegenerateError("reference norm is zero; relative error undefined")
    return float(np.linalg.norm(a - b)) / ref_norm
