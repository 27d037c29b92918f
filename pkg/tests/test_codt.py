"""Binary tensor container: round-trips and corruption handling."""

import numpy as np
import pytest

from tilefuse.codt import read_tensor, write_tensor
from tilefuse.errors import ContainerError
from tilefuse.tensors import DenseMatrix, PrecisionMode, Vector


@pytest.mark.parametrize("mode", list(PrecisionMode))
def test_matrix_round_trip_bit_exact(tmp_path, mode):
    rng = np.random.default_rng(7)
    t = DenseMatrix.from_array(rng.standard_normal((5, 9)), mode)
    p1, p2 = tmp_path / "a.codt", tmp_path / "b.codt"
    write_tensor(p1, t)
    back = read_tensor(p1)
    assert isinstance(back, DenseMatrix)
    assert back.precision is mode
    # stored values are grid-exact, so decode reproduces them bit for bit
    assert np.array_equal(back.data, t.data)
    write_tensor(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


@pytest.mark.parametrize("mode", list(PrecisionMode))
def test_vector_round_trip(tmp_path, mode):
    v = Vector.from_array(np.linspace(-3, 3, 11), mode)
    path = tmp_path / "v.codt"
    write_tensor(path, v)
    back = read_tensor(path)
    assert isinstance(back, Vector)
    assert np.array_equal(back.data, v.data)


def test_nonfinite_values_survive(tmp_path):
    t = DenseMatrix.from_array([[np.inf, -np.inf], [1.0, 0.5]])
    path = tmp_path / "inf.codt"
    write_tensor(path, t)
    assert np.array_equal(read_tensor(path).data, t.data)


def test_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.codt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ContainerError):
        read_tensor(path)


def test_rejects_truncated_file(tmp_path):
    src = tmp_path / "ok.codt"
    write_tensor(src, DenseMatrix.from_array(np.eye(4)))
    clipped = tmp_path / "short.codt"
    clipped.write_bytes(src.read_bytes()[:-3])
    with pytest.raises(ContainerError):
        read_tensor(clipped)


def test_rejects_unknown_precision_tag(tmp_path):
    src = tmp_path / "ok.codt"
    write_tensor(src, Vector.from_array([1.0, 2.0]))
    raw = bytearray(src.read_bytes())
    raw[4 + 4 + 8] = 9  # precision byte sits after magic, rank, one dim
    bad = tmp_path / "tag.codt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        read_tensor(bad)


def test_rejects_unsupported_rank(tmp_path):
    src = tmp_path / "ok.codt"
    write_tensor(src, Vector.from_array([1.0, 2.0]))
    raw = bytearray(src.read_bytes())
    raw[4] = 3
    bad = tmp_path / "rank.codt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        read_tensor(bad)


def test_rejects_foreign_objects(tmp_path):
    with pytest.raises(ContainerError):
        write_tensor(tmp_path / "x.codt", np.eye(2))
