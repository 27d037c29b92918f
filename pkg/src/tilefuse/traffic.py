"""Global-memory traffic accounting.

Every launch records the bytes it reads and writes at the modeled storage
widths: activations and weights at the problem precision's storage width,
partial blocks and row statistics at the partial width, integer labels at
four bytes.  Sizes are exact element counts times width; there is no cache
model and no reuse discounting, which is the conservative convention for
register-resident epilogues (side operands are charged once per launch).

Two ways to build a ledger live here:

  * the engine and the reduction helpers record real launches as they run;
  * `canonical_ledger` prices an op-by-op unfused sequence from closed
    forms, and the `fused_*_records` functions price the fused pipelines
    from the same closed forms the engine instrumentation implements.

A test pins the analytic fused records to the engine's recorded ledgers
at executable sizes, which is what licenses evaluating the big shapes
analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .errors import ConfigError, DegenerateError
from .tensors import PrecisionMode

LABEL_BYTES = 4

# launch names shared by the engine paths and the analytic formulas
K_RESIDUAL_RMS = "gemm_residual_partial_rms"
K_ROW_SCALE = "gemm_row_scale"
K_RMS_SWIGLU = "gemm_rms_swiglu"
K_RMS_ROPE = "gemm_rms_rope"
K_RMS_XENT = "gemm_rms_partial_xent"
K_PARTIAL_XENT = "gemm_partial_xent"
K_ROPE = "gemm_rope"
K_SWIGLU = "gemm_swiglu"
K_RMSNORM_BWD = "gemm_rmsnorm_backward"
K_SWIGLU_BWD = "gemm_swiglu_backward"
K_GEMM = "gemm"
K_ROPE_BWD_STAT = "rope_backward_stat"
R_FINALIZE_RMS = "finalize_rms"
R_FINALIZE_ROWDOT = "finalize_rowdot"
R_COMBINE_LSE = "combine_lse"
R_REDUCE_ROWVEC = "reduce_row_partials"
R_XENT_FINALIZE = "cross_entropy_finalize"


@dataclass(frozen=True)
class LaunchRecord:
    """Bytes moved by one launch."""

    name: str
    read_bytes: int
    write_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.read_bytes + self.write_bytes


@dataclass
class TrafficLedger:
    """Ordered log of launch records with byte totals."""

    records: list[LaunchRecord] = field(default_factory=list)

    def record(self, name: str, read_bytes: int, write_bytes: int) -> LaunchRecord:
        if read_bytes < 0 or write_bytes < 0:
            raise ConfigError("byte counts cannot be negative")
        rec = LaunchRecord(name, int(read_bytes), int(write_bytes))
        self.records.append(rec)
        return rec

    def add(self, rec: LaunchRecord) -> None:
        self.records.append(rec)

    def extend(self, recs: Iterable[LaunchRecord]) -> None:
        for rec in recs:
            self.records.append(rec)

    @property
    def launches(self) -> int:
        return len(self.records)

    @property
    def read_bytes(self) -> int:
        return sum(r.read_bytes for r in self.records)

    @property
    def write_bytes(self) -> int:
        return sum(r.write_bytes for r in self.records)

    @property
    def total_bytes(self) -> int:
        return self.read_bytes + self.write_bytes

    def merged(self, other: "TrafficLedger") -> "TrafficLedger":
        return TrafficLedger(self.records + other.records)

    def __repr__(self) -> str:
        return (
            f"TrafficLedger(launches={self.launches}, "
            f"read={self.read_bytes}, write={self.write_bytes})"
        )


@dataclass(frozen=True)
class CompareReport:
    """Fused-vs-canonical traffic comparison."""

    fused_read_bytes: int
    fused_write_bytes: int
    canonical_read_bytes: int
    canonical_write_bytes: int
    fused_launches: int
    canonical_launches: int

    @property
    def fused_total_bytes(self) -> int:
        return self.fused_read_bytes + self.fused_write_bytes

    @property
    def canonical_total_bytes(self) -> int:
        return self.canonical_read_bytes + self.canonical_write_bytes

    @property
    def byte_delta(self) -> int:
        """Canonical minus fused; positive means fusion saves bytes."""
        return self.canonical_total_bytes - self.fused_total_bytes

    @property
    def byte_ratio(self) -> float:
        if self.canonical_total_bytes == 0:
            if self.fused_total_bytes == 0:
                return 1.0
            raise DegenerateError("canonical ledger is empty but fused is not")
        return self.fused_total_bytes / self.canonical_total_bytes

    @property
    def launch_delta(self) -> int:
        return self.canonical_launches - self.fused_launches

    def as_dict(self) -> dict:
        return {
            "fused_read_bytes": self.fused_read_bytes,
            "fused_write_bytes": self.fused_write_bytes,
            "fused_total_bytes": self.fused_total_bytes,
            "fused_launches": self.fused_launches,
            "canonical_read_bytes": self.canonical_read_bytes,
            "canonical_write_bytes": self.canonical_write_bytes,
            "canonical_total_bytes": self.canonical_total_bytes,
            "canonical_launches": self.canonical_launches,
            "byte_delta": self.byte_delta,
            "byte_ratio": self.byte_ratio,
            "launch_delta": self.launch_delta,
        }


def compare(fused: TrafficLedger, canonical: TrafficLedger) -> CompareReport:
    return CompareReport(
        fused_read_bytes=fused.read_bytes,
        fused_write_bytes=fused.write_bytes,
        canonical_read_bytes=canonical.read_bytes,
        canonical_write_bytes=canonical.write_bytes,
        fused_launches=fused.launches,
        canonical_launches=canonical.launches,
    )


# ---------------------------------------------------------------------------
# canonical (unfused) op pricing


def canonical_ledger(
    ops: Sequence[tuple[str, dict]], precision: PrecisionMode
) -> TrafficLedger:
    """Price a sequence of standalone ops at the given storage precision.

    Each entry is ``(op_name, params)``.  Vocabulary (m rows throughout,
    element counts converted to bytes at the storage width, partials and
    row statistics at the partial width):

      gemm(m, n, k)              reads m*k + k*n, writes m*n
      residual_add(m, n)         reads 2*m*n, writes m*n
      rmsnorm(m, n, save_r)      reads m*n + n, writes m*n (+ m stat)
      residual_rmsnorm(m, n, save_r)
                                 reads 2*m*n, writes m*n (+ m stat); the
                                 n-element gain read is charged to the
                                 standalone `rmsnorm` form only
      rmsnorm_backward(m, n)     reads 2*m*n + n + m stat, writes m*n + n stat
      rope(m, n)                 reads 3*m*n, writes m*n
      rope_backward(m, n)        same as rope
      row_scale(m, n)            reads m*n + m stat, writes m*n
      swiglu(m, n)               reads m*n, writes m*n/2 (n even)
      swiglu_backward(m, n)      reads m*n/2 + m*n, writes m*n
      softmax_xent(m, v)         reads m*v + m labels, writes m losses

    Unknown op names raise ConfigError.  An empty sequence prices to zero.
    """
    w = precision.storage_bytes
    pw = precision.partial_bytes
    ledger = TrafficLedger()
    for name, params in ops:
        p = dict(params)
        try:
            if name == "gemm":
                m, n, k = p["m"], p["n"], p["k"]
                ledger.record(name, (m * k + k * n) * w, m * n * w)
            elif name == "residual_add":
                m, n = p["m"], p["n"]
                ledger.record(name, 2 * m * n * w, m * n * w)
            elif name == "rmsnorm":
                m, n = p["m"], p["n"]
                save_r = p.get("save_r", False)
                ledger.record(
                    name, (m * n + n) * w, m * n * w + (m * pw if save_r else 0)
                )
            elif name == "residual_rmsnorm":
                m, n = p["m"], p["n"]
                save_r = p.get("save_r", False)
                ledger.record(
                    name, 2 * m * n * w, m * n * w + (m * pw if save_r else 0)
                )
            elif name == "rmsnorm_backward":
                m, n = p["m"], p["n"]
                ledger.record(
                    name, (2 * m * n + n) * w + m * pw, m * n * w + n * pw
                )
            elif name in ("rope", "rope_backward"):
                m, n = p["m"], p["n"]
                ledger.record(name, 3 * m * n * w, m * n * w)
            elif name == "row_scale":
                m, n = p["m"], p["n"]
                ledger.record(name, m * n * w + m * pw, m * n * w)
            elif name == "swiglu":
                m, n = p["m"], p["n"]
                if n % 2:
                    raise ConfigError(f"swiglu width must be even, got {n}")
                ledger.record(name, m * n * w, m * (n // 2) * w)
            elif name == "swiglu_backward":
                m, n = p["m"], p["n"]
                if n % 2:
                    raise ConfigError(f"swiglu width must be even, got {n}")
                ledger.record(name, (m * (n // 2) + m * n) * w, m * n * w)
            elif name == "softmax_xent":
                m, v = p["m"], p["v"]
                ledger.record(name, m * v * w + m * LABEL_BYTES, m * pw)
            else:
                raise ConfigError(f"unknown canonical op {name!r}")
        except KeyError as exc:
            raise ConfigError(f"op {name!r} missing parameter {exc}") from exc
    return ledger


# ---------------------------------------------------------------------------
# analytic fused pricing (mirrors engine instrumentation exactly)


def row_blocks_count(n: int, tile_n: int, rtn: int, scale_num: int = 1) -> int:
    """Number of row-directed partial blocks across a width-n launch.

    Tiles of width ``tile_n`` are sub-blocked into runs of at most ``rtn``
    columns; a store emitted at an integer width scale multiplies each
    tile's span before sub-blocking.
    """
    if tile_n <= 0 or rtn <= 0 or scale_num <= 0:
        raise ConfigError("blocking parameters must be positive")
    total = 0
    col = 0
    while col < n:
        tw = min(tile_n, n - col)
        total += -(-(tw * scale_num) // rtn)
        col += tile_n
    return total


def col_blocks_count(m: int, tile_m: int) -> int:
    if tile_m <= 0:
        raise ConfigError("tile height must be positive")
    return -(-m // tile_m)


@dataclass(frozen=True)
class Shape:
    """Tiling and precision context for analytic pricing."""

    tile_m: int = 128
    tile_n: int = 128
    rtn: int = 128
    precision: PrecisionMode = PrecisionMode.EXACT64

    @property
    def w(self) -> int:
        return self.precision.storage_bytes

    @property
    def pw(self) -> int:
        return self.precision.partial_bytes


def _residual_rms_record(m: int, k: int, d: int, s: Shape) -> LaunchRecord:
    nbr = row_blocks_count(d, s.tile_n, s.rtn)
    reads = (m * k + k * d + m * d + d) * s.w
    writes = 2 * m * d * s.w + m * nbr * s.pw
    return LaunchRecord(K_RESIDUAL_RMS, reads, writes)


def _finalize_rms_record(m: int, d: int, s: Shape) -> LaunchRecord:
    nbr = row_blocks_count(d, s.tile_n, s.rtn)
    return LaunchRecord(R_FINALIZE_RMS, m * nbr * s.pw, m * s.pw)


def _finalize_rowdot_record(m: int, n: int, s: Shape, scale: int = 1) -> LaunchRecord:
    nbr = row_blocks_count(n, s.tile_n, s.rtn, scale)
    return LaunchRecord(R_FINALIZE_ROWDOT, m * nbr * s.pw, m * s.pw)


def _gemm_record(m: int, n: int, k: int, s: Shape) -> LaunchRecord:
    return LaunchRecord(K_GEMM, (m * k + k * n) * s.w, m * n * s.w)


def fused_grrg_records(m: int, k: int, d: int, n: int, s: Shape) -> list[LaunchRecord]:
    """GEMM -> residual -> normalize -> GEMM as three fused launches."""
    row_scale = LaunchRecord(
        K_ROW_SCALE, (m * d + d * n) * s.w + m * s.pw, m * n * s.w
    )
    return [
        _residual_rms_record(m, k, d, s),
        _finalize_rms_record(m, d, s),
        row_scale,
    ]


def canonical_grrg_ops(m: int, k: int, d: int, n: int) -> list[tuple[str, dict]]:
    return [
        ("gemm", {"m": m, "n": d, "k": k}),
        ("residual_add", {"m": m, "n": d}),
        ("rmsnorm", {"m": m, "n": d}),
        ("gemm", {"m": m, "n": n, "k": d}),
    ]


def fused_layer_forward_records(m: int, d: int, ffn: int, s: Shape) -> list[LaunchRecord]:
    half = ffn // 2
    qkv = 3 * d
    rms_swiglu = LaunchRecord(
        K_RMS_SWIGLU,
        (m * d + d * ffn) * s.w + m * s.pw,
        (m * ffn + m * half) * s.w,
    )
    rms_rope = LaunchRecord(
        K_RMS_ROPE,
        (m * d + d * qkv) * s.w + m * s.pw + 2 * m * qkv * s.w,
        m * qkv * s.w,
    )
    return [
        _residual_rms_record(m, d, d, s),
        _finalize_rms_record(m, d, s),
        rms_swiglu,
        _residual_rms_record(m, half, d, s),
        _finalize_rms_record(m, d, s),
        rms_rope,
    ]


def canonical_layer_forward_ops(m: int, d: int, ffn: int) -> list[tuple[str, dict]]:
    half = ffn // 2
    qkv = 3 * d
    return [
        ("gemm", {"m": m, "n": d, "k": d}),
        ("residual_add", {"m": m, "n": d}),
        ("rmsnorm", {"m": m, "n": d, "save_r": True}),
        ("gemm", {"m": m, "n": ffn, "k": d}),
        ("swiglu", {"m": m, "n": ffn}),
        ("gemm", {"m": m, "n": d, "k": half}),
        ("residual_add", {"m": m, "n": d}),
        ("rmsnorm", {"m": m, "n": d, "save_r": True}),
        ("gemm", {"m": m, "n": qkv, "k": d}),
        ("rope", {"m": m, "n": qkv}),
    ]


def fused_layer_backward_records(
    m: int, d: int, ffn: int, s: Shape, with_residual_grad: bool = True
) -> list[LaunchRecord]:
    half = ffn // 2
    qkv = 3 * d
    nbr_qkv = row_blocks_count(qkv, s.tile_n, s.rtn)
    nbc = col_blocks_count(m, s.tile_m)
    rope_bwd = LaunchRecord(
        K_ROPE_BWD_STAT,
        4 * m * qkv * s.w,
        m * qkv * s.w + m * nbr_qkv * s.pw,
    )
    rms_bwd_b = LaunchRecord(
        K_RMSNORM_BWD,
        (m * qkv + qkv * d + m * d + d) * s.w
        + 2 * m * s.pw
        + (m * d * s.w if with_residual_grad else 0),
        2 * m * d * s.w + nbc * d * s.pw,
    )
    reduce_gamma = LaunchRecord(R_REDUCE_ROWVEC, nbc * d * s.pw, d * s.pw)
    swiglu_bwd = LaunchRecord(
        K_SWIGLU_BWD,
        (m * d + d * half + m * ffn) * s.w,
        (m * ffn + m * half) * s.w
        + m * row_blocks_count(half, s.tile_n, s.rtn, 2) * s.pw,
    )
    rms_bwd_a = LaunchRecord(
        K_RMSNORM_BWD,
        (m * ffn + ffn * d + m * d + d) * s.w + 2 * m * s.pw + m * d * s.w,
        2 * m * d * s.w + nbc * d * s.pw,
    )
    return [
        rope_bwd,
        _finalize_rowdot_record(m, qkv, s),
        rms_bwd_b,
        _gemm_record(d, qkv, m, s),        # weight grad, contraction over rows
        reduce_gamma,
        swiglu_bwd,
        _finalize_rowdot_record(m, half, s, scale=2),
        _gemm_record(half, d, m, s),
        rms_bwd_a,
        _gemm_record(d, ffn, m, s),
        reduce_gamma,
        _gemm_record(m, d, d, s),          # input grad
        _gemm_record(d, d, m, s),          # input-projection weight grad
    ]


def canonical_layer_backward_ops(
    m: int, d: int, ffn: int, with_residual_grad: bool = True
) -> list[tuple[str, dict]]:
    half = ffn // 2
    qkv = 3 * d
    ops: list[tuple[str, dict]] = [
        ("rope_backward", {"m": m, "n": qkv}),
        ("gemm", {"m": m, "n": d, "k": qkv}),
        ("gemm", {"m": d, "n": qkv, "k": m}),
        ("rmsnorm_backward", {"m": m, "n": d}),
    ]
    if with_residual_grad:
        ops.append(("residual_add", {"m": m, "n": d}))
    ops += [
        ("gemm", {"m": m, "n": half, "k": d}),
        ("swiglu_backward", {"m": m, "n": ffn}),
        ("gemm", {"m": half, "n": d, "k": m}),
        ("gemm", {"m": m, "n": d, "k": ffn}),
        ("gemm", {"m": d, "n": ffn, "k": m}),
        ("rmsnorm_backward", {"m": m, "n": d}),
        ("residual_add", {"m": m, "n": d}),
        ("gemm", {"m": m, "n": d, "k": d}),
        ("gemm", {"m": d, "n": d, "k": m}),
    ]
    return ops


def fused_lm_head_records(m: int, k: int, d: int, v: int, s: Shape) -> list[LaunchRecord]:
    nbr_v = row_blocks_count(v, s.tile_n, s.rtn)
    rms_xent = LaunchRecord(
        K_RMS_XENT,
        (m * d + d * v) * s.w + m * s.pw + m * LABEL_BYTES,
        m * s.pw + 2 * m * nbr_v * s.pw,
    )
    combine = LaunchRecord(R_COMBINE_LSE, 2 * m * nbr_v * s.pw, m * s.pw)
    finalize = LaunchRecord(R_XENT_FINALIZE, 2 * m * s.pw, m * s.pw)
    return [
        _residual_rms_record(m, k, d, s),
        _finalize_rms_record(m, d, s),
        rms_xent,
        combine,
        finalize,
    ]


def canonical_lm_head_ops(m: int, k: int, d: int, v: int) -> list[tuple[str, dict]]:
    return [
        ("gemm", {"m": m, "n": d, "k": k}),
        ("residual_add", {"m": m, "n": d}),
        ("rmsnorm", {"m": m, "n": d}),
        ("gemm", {"m": m, "n": v, "k": d}),
        ("softmax_xent", {"m": m, "v": v}),
    ]


def ledger_from_records(records: Iterable[LaunchRecord]) -> TrafficLedger:
    ledger = TrafficLedger()
    ledger.extend(records)
    return ledger
