"""Tiled GEMM mainloop: exactness, tiling independence, accounting, errors."""

import numpy as np
import pytest

from tilefuse import oracles
from tilefuse.engine import GemmProblem, run_gemm
from tilefuse.epilogue import EpilogueProgram, OnlineLse, RowVecMul, TargetGather
from tilefuse.errors import (
    BindingError,
    ConfigError,
    DimensionError,
    LabelError,
)
from tilefuse.tensors import (
    DenseMatrix,
    PrecisionMode,
    TileShape,
    Vector,
    quantize,
)
from tilefuse.traffic import TrafficLedger


def problem(m, n, k, tile=(4, 4), rtn=4, precision=PrecisionMode.EXACT64, **kw):
    return GemmProblem(
        m=m, n=n, k=k, tile_shape=TileShape(*tile), reduction_tile_n=rtn,
        precision=precision, **kw,
    )


def rand(rng, *shape, precision=PrecisionMode.EXACT64):
    return DenseMatrix.from_array(rng.standard_normal(shape), precision)


def test_identity_times_b_is_exact():
    rng = np.random.default_rng(0)
    b = rand(rng, 6, 5)
    a = DenseMatrix.from_array(np.eye(6))
    out = run_gemm(problem(6, 5, 6), a, b)
    assert np.array_equal(out.main.data, b.data)


def test_one_by_one():
    a = DenseMatrix.from_array([[2.0]])
    b = DenseMatrix.from_array([[3.0]])
    assert run_gemm(problem(1, 1, 1), a, b).main.data[0, 0] == 6.0


@pytest.mark.parametrize("m,n,k", [(8, 8, 8), (9, 7, 5), (1, 13, 3), (5, 1, 9)])
def test_matches_triple_loop(m, n, k):
    rng = np.random.default_rng(m * 100 + n * 10 + k)
    a, b = rand(rng, m, k), rand(rng, k, n)
    got = run_gemm(problem(m, n, k), a, b).main.data
    ref = oracles.gemm_ref(a.data, b.data)
    assert np.linalg.norm(got - ref) <= 1e-13 * max(1.0, np.linalg.norm(ref))


def test_transposed_operands():
    rng = np.random.default_rng(3)
    a, b = rand(rng, 5, 7), rand(rng, 6, 5)
    ref = oracles.gemm_ref(a.data, b.data, trans_a=True, trans_b=True)
    got = run_gemm(
        problem(7, 6, 5, trans_a=True, trans_b=True), a, b
    ).main.data
    assert np.allclose(got, ref, rtol=1e-14, atol=1e-14)


def test_tile_order_is_irrelevant_bit_for_bit():
    rng = np.random.default_rng(4)
    a, b = rand(rng, 10, 6), rand(rng, 6, 9)
    p = problem(10, 9, 6, tile=(4, 4))
    base = run_gemm(p, a, b).main.data
    grid = [(i, j) for i in range(3) for j in range(3)]
    for order in (list(reversed(grid)), grid[1::2] + grid[0::2]):
        permuted = run_gemm(p, a, b, tile_order=order).main.data
        assert np.array_equal(permuted, base)


def test_tile_order_must_be_a_permutation():
    rng = np.random.default_rng(5)
    a, b = rand(rng, 4, 4), rand(rng, 4, 4)
    with pytest.raises(ConfigError):
        run_gemm(problem(4, 4, 4), a, b, tile_order=[(0, 0), (0, 0)])


def test_ledger_accounting_plain_gemm():
    rng = np.random.default_rng(6)
    m, n, k = 6, 10, 7
    a, b = rand(rng, m, k), rand(rng, k, n)
    ledger = TrafficLedger()
    res = run_gemm(problem(m, n, k), a, b, kernel_name="gemm", ledger=ledger)
    assert res.record.read_bytes == (m * k + k * n) * 8
    assert res.record.write_bytes == m * n * 8
    assert ledger.launches == 1 and ledger.records[0] is res.record


def test_row_vec_operand_reads_once_per_launch():
    rng = np.random.default_rng(7)
    m, n, k = 4, 6, 3
    a, b = rand(rng, m, k), rand(rng, k, n)
    g = Vector.from_array(rng.standard_normal(n))
    prog = EpilogueProgram([RowVecMul("gamma")])
    res = run_gemm(problem(m, n, k), a, b, prog, {"gamma": g})
    assert res.record.read_bytes == (m * k + k * n + n) * 8
    assert np.allclose(res.main.data, (a.data @ b.data) * g.data, atol=1e-14)


def test_store_main_false_writes_nothing():
    rng = np.random.default_rng(8)
    a, b = rand(rng, 4, 4), rand(rng, 4, 4)
    res = run_gemm(problem(4, 4, 4), a, b, store_main=False)
    assert res.main is None
    assert res.record.write_bytes == 0


def test_reduced_precision_output_lives_on_grid():
    rng = np.random.default_rng(9)
    for mode in (PrecisionMode.SIM32, PrecisionMode.SIMBF16):
        a = rand(rng, 5, 6, precision=mode)
        b = rand(rng, 6, 4, precision=mode)
        out = run_gemm(problem(5, 4, 6, precision=mode), a, b).main
        assert out.precision is mode
        assert np.array_equal(quantize(out.data, mode), out.data)


def test_reduced_precision_reads_are_narrow():
    rng = np.random.default_rng(10)
    mode = PrecisionMode.SIMBF16
    m, n, k = 4, 4, 4
    a, b = rand(rng, m, k, precision=mode), rand(rng, k, n, precision=mode)
    res = run_gemm(problem(m, n, k, precision=mode), a, b)
    assert res.record.read_bytes == (m * k + k * n) * 2
    assert res.record.write_bytes == m * n * 2


class TestBindingErrors:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.a, self.b = rand(rng, 4, 3), rand(rng, 3, 5)
        self.p = problem(4, 5, 3)

    def test_missing_operand(self):
        prog = EpilogueProgram([RowVecMul("gamma")])
        with pytest.raises(BindingError):
            run_gemm(self.p, self.a, self.b, prog, {})

    def test_unused_binding(self):
        extra = {"stray": Vector.from_array(np.ones(5))}
        with pytest.raises(BindingError):
            run_gemm(self.p, self.a, self.b, None, extra)

    def test_wrong_container_kind(self):
        prog = EpilogueProgram([RowVecMul("gamma")])
        bad = {"gamma": DenseMatrix.from_array(np.ones((1, 5)))}
        with pytest.raises(BindingError):
            run_gemm(self.p, self.a, self.b, prog, bad)

    def test_wrong_vector_length(self):
        prog = EpilogueProgram([RowVecMul("gamma")])
        bad = {"gamma": Vector.from_array(np.ones(4))}
        with pytest.raises(DimensionError):
            run_gemm(self.p, self.a, self.b, prog, bad)

    def test_operand_shape_mismatch(self):
        with pytest.raises(DimensionError):
            run_gemm(self.p, self.b, self.a)

    def test_operands_must_be_matrices(self):
        with pytest.raises(BindingError):
            run_gemm(self.p, self.a.data, self.b.data)


class TestLabels:
    def make(self, labels):
        rng = np.random.default_rng(12)
        a, b = rand(rng, 4, 3), rand(rng, 3, 5)
        prog = EpilogueProgram([OnlineLse(), TargetGather()])
        return run_gemm(problem(4, 5, 3), a, b, prog, {"labels": labels},
                        store_main=False)

    def test_valid_labels_gather(self):
        res = self.make(np.array([0, 4, 2, 2]))
        assert res.aux["target"].length == 4

    def test_out_of_range_label(self):
        with pytest.raises(LabelError):
            self.make(np.array([0, 5, 2, 2]))

    def test_negative_label(self):
        with pytest.raises(LabelError):
            self.make(np.array([0, -1, 2, 2]))

    def test_float_labels_rejected(self):
        with pytest.raises(LabelError):
            self.make(np.array([0.0, 1.0, 2.0, 3.0]))


class TestProblemValidation:
    def test_nonpositive_dims(self):
        with pytest.raises(DimensionError):
            GemmProblem(m=0, n=4, k=4)

    def test_bad_tile(self):
        with pytest.raises(ConfigError):
            GemmProblem(m=4, n=4, k=4, tile_shape=TileShape(0, 4))

    def test_bad_reduction_tile(self):
        with pytest.raises(ConfigError):
            GemmProblem(m=4, n=4, k=4, reduction_tile_n=0)
