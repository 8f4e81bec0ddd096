import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from sscg import (
    LowRankTriple,
    MultitermOperator,
    apply_operator_factored,
    frob_norm_factored,
    inner_product_factored,
    relative_change,
)
from sscg.lowrank import BlockFactorization, orthonormality_error

from conftest import random_triple


def _random_op(rng, n_a, n_b, n_terms, density=0.4):
    left = [sp.random(n_a, n_a, density=density, random_state=rng) for _ in range(n_terms)]
    right = [sp.random(n_b, n_b, density=density, random_state=rng) for _ in range(n_terms)]
    return MultitermOperator(left, right)


def _dense_apply(op, x):
    return sum(a.toarray() @ x @ b.toarray() for a, b in zip(op.left, op.right))


class TestApplyOperator:
    def test_identity_term_reconstructs_input(self, rng):
        x = random_triple(rng, 7, 5, 1)
        op = MultitermOperator([sp.identity(7)], [sp.identity(5)])
        np.testing.assert_allclose(apply_operator_factored(op, x).to_dense(), x.to_dense(), atol=1e-15)

    def test_rank_zero_gives_empty_blocks(self):
        op = MultitermOperator([sp.identity(4)] * 2, [sp.identity(3)] * 2)
        bf = apply_operator_factored(op, LowRankTriple.zero(4, 3))
        assert bf.width == 0

    def test_three_sparse_terms_match_dense(self, rng):
        op = _random_op(rng, 8, 8, 3)
        x = random_triple(rng, 8, 8, 2)
        ref = _dense_apply(op, x.to_dense())
        got = apply_operator_factored(op, x).to_dense()
        assert np.linalg.norm(got - ref) <= 1e-13 * np.linalg.norm(ref)

    def test_dimension_mismatch_names_term(self, rng):
        op = MultitermOperator([sp.identity(6)], [sp.identity(5)])
        with pytest.raises(ValueError, match="term 0"):
            apply_operator_factored(op, random_triple(rng, 4, 5, 1))

    @settings(max_examples=40, deadline=None)
    @given(n_a=st.integers(1, 32), n_b=st.integers(1, 32), n_terms=st.integers(1, 5),
           rank=st.integers(0, 6), seed=st.integers(0, 2**31))
    def test_property_matches_dense(self, n_a, n_b, n_terms, rank, seed):
        rng = np.random.default_rng(seed)
        rank = min(rank, n_a, n_b)
        op = _random_op(rng, n_a, n_b, n_terms)
        x = random_triple(rng, n_a, n_b, rank)
        ref = _dense_apply(op, x.to_dense())
        got = apply_operator_factored(op, x).to_dense() if rank else np.zeros((n_a, n_b))
        assert np.linalg.norm(got - ref) <= 1e-12 * max(np.linalg.norm(ref), 1e-300)


class TestInnerProductAndNorm:
    def test_rank_one_scaled(self):
        u = np.array([[1.0], [0.0], [0.0]])
        x = LowRankTriple(u, [[2.0]], u)
        assert inner_product_factored(x, x) == pytest.approx(4.0)

    def test_rank_zero_is_zero(self, rng):
        x = random_triple(rng, 5, 6, 2)
        assert inner_product_factored(x, LowRankTriple.zero(5, 6)) == 0.0
        assert frob_norm_factored(LowRankTriple.zero(5, 6)) == 0.0

    def test_matches_dense_trace(self, rng):
        x = random_triple(rng, 20, 20, 3)
        y = random_triple(rng, 20, 20, 3)
        ref = np.trace(x.to_dense().T @ y.to_dense())
        assert inner_product_factored(x, y) == pytest.approx(ref, rel=1e-13)
        assert inner_product_factored(y, x) == pytest.approx(inner_product_factored(x, y), rel=1e-13)

    def test_norm_of_diag_core(self):
        e = np.eye(4)[:, :2]
        assert frob_norm_factored(LowRankTriple(e, np.diag([3.0, 4.0]), e)) == pytest.approx(5.0)

    def test_norm_matches_dense(self, rng):
        x = random_triple(rng, 30, 30, 4)
        assert frob_norm_factored(x) == pytest.approx(np.linalg.norm(x.to_dense()), rel=1e-13)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            inner_product_factored(random_triple(rng, 4, 4, 1), random_triple(rng, 5, 4, 1))


class TestRelativeChange:
    def test_identical_is_zero(self, rng):
        x = random_triple(rng, 12, 9, 3)
        assert relative_change(x, x) == 0.0

    def test_from_zero_is_one(self, rng):
        x = random_triple(rng, 12, 9, 3)
        assert relative_change(LowRankTriple.zero(12, 9), x) == pytest.approx(1.0)

    def test_matches_dense(self, rng):
        a = random_triple(rng, 25, 25, 3)
        b = random_triple(rng, 25, 25, 5)
        ref = np.linalg.norm(b.to_dense() - a.to_dense()) / np.linalg.norm(b.to_dense())
        assert abs(relative_change(a, b) - ref) <= 1e-10

    def test_tiny_change_is_accurate(self, rng):
        # the trace expansion alone would lose all digits here
        a = random_triple(rng, 25, 25, 3)
        b = LowRankTriple(a.left, a.core * (1 + 1e-11), a.right)
        ref = np.linalg.norm(b.to_dense() - a.to_dense()) / np.linalg.norm(b.to_dense())
        assert relative_change(a, b) == pytest.approx(ref, rel=1e-3)

    def test_zero_next_raises(self, rng):
        with pytest.raises(ValueError, match="zero iterate"):
            relative_change(random_triple(rng, 4, 4, 1), LowRankTriple.zero(4, 4))


class TestTypes:
    def test_from_factors_is_orthonormal(self, rng):
        x = LowRankTriple.from_factors(rng.standard_normal((10, 3)), rng.standard_normal((7, 3)))
        assert orthonormality_error(x) <= 1e-10 * np.sqrt(x.rank)
        np.testing.assert_allclose(x.to_dense(), x.left @ x.core @ x.right.T)

    def test_triple_is_read_only(self, rng):
        x = random_triple(rng, 5, 5, 2)
        with pytest.raises(ValueError):
            x.core[0, 0] = 1.0

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            LowRankTriple(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros((3, 1)))

    def test_block_width_mismatch(self):
        with pytest.raises(ValueError):
            BlockFactorization([np.zeros((3, 2))], np.zeros((2, 1)), [np.zeros((3, 1))])

    def test_operator_symmetrizes_and_checks_sizes(self):
        a = sp.csr_matrix(np.array([[2.0, 1.0], [0.0, 2.0]]))
        op = MultitermOperator([a], [sp.identity(3)])
        np.testing.assert_allclose(op.left[0].toarray(), [[2.0, 0.5], [0.5, 2.0]])
        with pytest.raises(ValueError, match="term 1"):
            MultitermOperator([sp.identity(2), sp.identity(3)], [sp.identity(2), sp.identity(2)])

    def test_symmetry_probe(self, rng):
        a = sp.csr_matrix(np.diag(np.arange(1.0, 5.0)))
        assert MultitermOperator([a, sp.identity(4)], [sp.identity(4), a]).symmetric
        b = sp.csr_matrix(np.diag([1.0, 3.0, 2.0, 5.0]))
        assert not MultitermOperator([a], [b]).symmetric
        assert not MultitermOperator([a], [sp.identity(3)]).symmetric
