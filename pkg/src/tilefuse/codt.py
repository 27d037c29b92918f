"""Binary tensor container used by the CLI for tensor I/O.

Layout (all little-endian):

    magic   4 bytes  b"CODT"
    rank    u32      1 for vectors, 2 for matrices
    dims    rank*u64
    prec    u8       0 = exact64, 1 = sim32, 2 = simbf16
    payload row-major elements at the modeled width
             (f64 / f32 / u16 upper-half bfloat16 patterns)

Because stored values are always exactly representable in their declared
precision, write/read round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContainerError
from .tensors import DenseMatrix, PrecisionMode, Vector

MAGIC = b"CODT"

_PREC_TAG = {PrecisionMode.EXACT64: 0, PrecisionMode.SIM32: 1, PrecisionMode.SIMBF16: 2}
_TAG_PREC = {v: k for k, v in _PREC_TAG.items()}


def _encode_payload(data: np.ndarray, precision: PrecisionMode) -> bytes:
    flat = np.ascontiguousarray(data, dtype=np.float64).reshape(-1)
    if precision is PrecisionMode.EXACT64:
        return flat.astype("<f8").tobytes()
    if precision is PrecisionMode.SIM32:
        return flat.astype("<f4").tobytes()
    # bfloat16: values are binary32-exact, so the truncated upper half
    # of the binary32 pattern is lossless.
    bits = flat.astype(np.float32).view(np.uint32)
    return (bits >> np.uint32(16)).astype("<u2").tobytes()


def _decode_payload(raw: bytes, count: int, precision: PrecisionMode) -> np.ndarray:
    if precision is PrecisionMode.EXACT64:
        arr = np.frombuffer(raw, dtype="<f8", count=count)
        return arr.astype(np.float64)
    if precision is PrecisionMode.SIM32:
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)
    half = np.frombuffer(raw, dtype="<u2", count=count).astype(np.uint32)
    return (half << np.uint32(16)).view(np.float32).astype(np.float64)


def write_tensor(path, tensor: DenseMatrix | Vector) -> None:
    """Serialize a DenseMatrix or Vector to ``path``."""
    if isinstance(tensor, DenseMatrix):
        dims = tensor.shape
    elif isinstance(tensor, Vector):
        dims = (tensor.length,)
    else:
        raise ContainerError(f"cannot serialize {type(tensor).__name__}")
    header = MAGIC + struct.pack("<I", len(dims))
    header += struct.pack(f"<{len(dims)}Q", *dims)
    header += struct.pack("<B", _PREC_TAG[tensor.precision])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_encode_payload(tensor.data, tensor.precision))


def read_tensor(path) -> DenseMatrix | Vector:
    """Deserialize a tensor written by :func:`write_tensor`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a CODT container")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank not in (1, 2):
        raise ContainerError(f"{path}: unsupported rank {rank}")
    offset = 8
    dims = struct.unpack_from(f"<{rank}Q", raw, offset)
    offset += 8 * rank
    (tag,) = struct.unpack_from("<B", raw, offset)
    offset += 1
    if tag not in _TAG_PREC:
        raise ContainerError(f"{path}: unknown precision tag {tag}")
    precision = _TAG_PREC[tag]
    count = int(np.prod(dims))
    expected = count * {0: 8, 1: 4, 2: 2}[tag]
    if len(raw) - offset != expected:
        raise ContainerError(
            f"{path}: payload holds {len(raw) - offset} bytes, expected {expected}"
        )
    values = _decode_payload(raw[offset:], count, precision)
    if rank == 1:
        return Vector.from_array(values, precision)
    return DenseMatrix.from_array(values.reshape(dims), precision)
