"""Statistics finalizers: block invariance, edge cases, accounting."""

import math

import numpy as np
import pytest

from tilefuse import oracles
from tilefuse.engine import GemmProblem, run_gemm
from tilefuse.epilogue import (
    EpilogueProgram,
    OnlineLse,
    PartialColSum,
    PartialSumSq,
    PartialSlot,
    StoreKind,
    TargetGather,
)
from tilefuse.errors import (
    ConfigError,
    DegenerateError,
    DimensionError,
    MissingGatherError,
)
from tilefuse.reductions import (
    combine_lse,
    cross_entropy_finalize,
    finalize_rms,
    finalize_rowdot,
    reduce_row_partials,
)
from tilefuse.tensors import DenseMatrix, PrecisionMode, TileShape, Vector
from tilefuse.traffic import TrafficLedger


def sumsq_slot(values: np.ndarray, tile=(4, 4), rtn=4):
    """Run an identity GEMM so the epilogue sees exactly ``values``."""
    m, n = values.shape
    a = DenseMatrix.from_array(values)
    b = DenseMatrix.from_array(np.eye(n))
    p = GemmProblem(m=m, n=n, k=n, tile_shape=TileShape(*tile),
                    reduction_tile_n=rtn)
    res = run_gemm(p, a, b, EpilogueProgram([PartialSumSq()]), {},
                   store_main=False)
    return res.aux["sumsq"]


def lse_slot(values: np.ndarray, tile=(4, 4), rtn=4):
    m, n = values.shape
    a = DenseMatrix.from_array(values)
    b = DenseMatrix.from_array(np.eye(n))
    p = GemmProblem(m=m, n=n, k=n, tile_shape=TileShape(*tile),
                    reduction_tile_n=rtn)
    res = run_gemm(p, a, b, EpilogueProgram([OnlineLse()]), {},
                   store_main=False)
    return res.aux["lse"]


class TestFinalizeRms:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 10))
        r = finalize_rms(sumsq_slot(x), eps=1e-6)
        want = 1.0 / np.sqrt(np.mean(x * x, axis=1) + 1e-6)
        assert np.allclose(r.data, want, rtol=1e-13, atol=0)

    def test_blocking_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 24))
        results = [
            finalize_rms(sumsq_slot(x, tile=tile, rtn=rtn)).data
            for tile, rtn in (((4, 4), 4), ((4, 24), 24), ((4, 8), 3), ((4, 5), 2))
        ]
        for got in results[1:]:
            assert np.allclose(got, results[0], rtol=1e-12, atol=0)

    def test_all_zero_rows_hit_the_eps_floor(self):
        r = finalize_rms(sumsq_slot(np.zeros((3, 8))), eps=1e-6)
        assert np.allclose(r.data, 1.0 / math.sqrt(1e-6), rtol=1e-15)

    def test_empty_coverage_rejected(self):
        slot = PartialSlot(
            kind=StoreKind.ROW_SUM,
            data=np.zeros((2, 1)),
            counts=np.array([0]),
            precision=PrecisionMode.EXACT64,
        )
        with pytest.raises(DegenerateError):
            finalize_rms(slot)

    def test_wrong_slot_kind_rejected(self):
        slot = lse_slot(np.zeros((2, 4)))
        with pytest.raises(ConfigError):
            finalize_rms(slot)

    def test_reads_partials_not_activations(self):
        x = np.random.default_rng(2).standard_normal((16, 64))
        ledger = TrafficLedger()
        finalize_rms(sumsq_slot(x, tile=(4, 16), rtn=16), ledger=ledger)
        rec = ledger.records[0]
        assert rec.name == "finalize_rms"
        # 4 blocks of 16 instead of 64 full-width columns per row
        assert rec.read_bytes == 16 * 4 * 8
        assert rec.read_bytes < x.size * 8
        assert rec.write_bytes == 16 * 8


class TestFinalizeRowdot:
    def test_divides_by_the_declared_width(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 10))
        w = rng.standard_normal((4, 10))
        slot = PartialSlot(
            kind=StoreKind.ROW_SUM,
            data=(x * w).reshape(4, 5, 2).sum(axis=2),
            counts=np.full(5, 2),
            precision=PrecisionMode.EXACT64,
        )
        # the statistic feeds a width-16 normalization even though the
        # partials were collected over 10 columns
        s = finalize_rowdot(slot, d=16)
        assert np.allclose(s.data, np.sum(x * w, axis=1) / 16, rtol=1e-13)

    def test_rejects_bad_width(self):
        slot = sumsq_slot(np.ones((2, 4)))
        with pytest.raises(ConfigError):
            finalize_rowdot(slot, d=0)


class TestCombineLse:
    def test_matches_direct_logsumexp(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 13)) * 3
        got = combine_lse(lse_slot(x, rtn=3))
        assert np.allclose(got.data, oracles.logsumexp_ref(x), rtol=1e-13)

    def test_blocking_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 32))
        base = combine_lse(lse_slot(x, tile=(4, 32), rtn=32)).data
        for tile, rtn in (((4, 4), 4), ((4, 16), 5), ((4, 32), 1)):
            got = combine_lse(lse_slot(x, tile=tile, rtn=rtn)).data
            assert np.allclose(got, base, rtol=1e-12, atol=1e-12)

    def test_huge_shifts_stay_finite(self):
        x = np.array([[1000.0, -1000.0, 999.0, 998.0]])
        got = combine_lse(lse_slot(x, rtn=1))
        assert np.allclose(got.data, oracles.logsumexp_ref(x), rtol=1e-13)

    def test_empty_blocks_are_ignored(self):
        data = np.full((2, 3, 2), -np.inf)
        data[..., 1] = 0.0
        data[:, 1, 0] = [2.0, 5.0]  # one real block, two never-written ones
        data[:, 1, 1] = 1.0
        slot = PartialSlot(StoreKind.ROW_PAIR, data, np.array([4, 4, 4]),
                           PrecisionMode.EXACT64)
        got = combine_lse(slot)
        assert np.allclose(got.data, [2.0, 5.0], atol=1e-15)

    def test_fully_empty_row_rejected(self):
        data = np.full((2, 2, 2), -np.inf)
        data[..., 1] = 0.0
        data[0, 0, 0], data[0, 0, 1] = 1.0, 1.0
        slot = PartialSlot(StoreKind.ROW_PAIR, data, np.array([2, 2]),
                           PrecisionMode.EXACT64)
        with pytest.raises(DegenerateError):
            combine_lse(slot)


class TestReduceRowPartials:
    def test_sums_per_tile_row_partials(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((10, 6))
        a = DenseMatrix.from_array(x)
        b = DenseMatrix.from_array(np.eye(6))
        p = GemmProblem(m=10, n=6, k=6, tile_shape=TileShape(4, 4),
                        reduction_tile_n=4)
        res = run_gemm(p, a, b, EpilogueProgram([PartialColSum()]), {},
                       store_main=False)
        out = reduce_row_partials(res.aux["colsum"])
        assert np.allclose(out.data, x.sum(axis=0), atol=1e-12)

    def test_wrong_kind_rejected(self):
        with pytest.raises(ConfigError):
            reduce_row_partials(sumsq_slot(np.ones((2, 4))))


class TestCrossEntropyFinalize:
    def run_pieces(self, logits, labels):
        m, v = logits.shape
        a = DenseMatrix.from_array(logits)
        b = DenseMatrix.from_array(np.eye(v))
        p = GemmProblem(m=m, n=v, k=v, tile_shape=TileShape(4, 4),
                        reduction_tile_n=4)
        prog = EpilogueProgram([OnlineLse(), TargetGather()])
        res = run_gemm(p, a, b, prog, {"labels": labels}, store_main=False)
        lse = combine_lse(res.aux["lse"])
        return res.aux["target"], lse

    def test_matches_reference_loss(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((5, 12)) * 2
        labels = rng.integers(0, 12, size=5)
        target, lse = self.run_pieces(logits, labels)
        losses, mean = cross_entropy_finalize(target, lse)
        want_losses, want_mean = oracles.cross_entropy_ref(logits, labels)
        assert np.allclose(losses.data, want_losses, rtol=1e-13)
        assert mean == pytest.approx(want_mean, rel=1e-13)

    def test_length_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            cross_entropy_finalize(
                Vector.from_array([1.0, 2.0]), Vector.from_array([1.0])
            )

    def test_unvisited_rows_rejected(self):
        target = Vector.from_array([1.0, np.nan])
        lse = Vector.from_array([1.0, 1.0])
        with pytest.raises(MissingGatherError):
            cross_entropy_finalize(target, lse)
