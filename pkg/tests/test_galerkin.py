import numpy as np
import pytest
import scipy.sparse as sp

from sscg import LowRankTriple, MultitermOperator, gen_random_spd
from sscg.galerkin import (
    ProjectedOperator,
    ReducedProblemTooLarge,
    ReducedSolveError,
    assemble_hessian,
    project_operator,
    projected_operator_rhs,
    solve_alpha,
    solve_beta,
)

from conftest import random_spd, random_triple


def _basis(rng, n, s):
    q, _ = np.linalg.qr(rng.standard_normal((n, s)))
    return q


def _spd_projected(rng, s, n_terms):
    return ProjectedOperator(tuple(random_spd(rng, s, 5.0) for _ in range(n_terms)),
                             tuple(random_spd(rng, s, 5.0) for _ in range(n_terms)))


def _dense_apply(op, x):
    return op.apply_dense(x)


class TestProjection:
    def test_identity_projects_to_identity(self, rng):
        op = MultitermOperator([sp.identity(9)], [sp.identity(7)])
        po = project_operator(op, _basis(rng, 9, 3), _basis(rng, 7, 3))
        np.testing.assert_allclose(po.left[0], np.eye(3), atol=1e-14)
        np.testing.assert_allclose(po.right[0], np.eye(3), atol=1e-14)

    def test_single_column_gives_scalars(self, rng):
        p = gen_random_spd(10, 10, 2, seed=0)
        v = _basis(rng, 10, 1)
        po = project_operator(p.operator, v, v)
        a = p.operator.left[1].toarray()
        assert po.left[1].shape == (1, 1)
        assert po.left[1][0, 0] == pytest.approx((v.T @ a @ v).item())

    def test_matches_dense(self, rng):
        p = gen_random_spd(20, 20, 3, seed=5)
        pl, pr = _basis(rng, 20, 3), _basis(rng, 20, 3)
        po = project_operator(p.operator, pl, pr)
        for i, (a, b) in enumerate(zip(p.operator.left, p.operator.right)):
            ref = pl.T @ a.toarray() @ pl
            assert np.linalg.norm(po.left[i] - ref) <= 1e-13 * np.linalg.norm(ref)
            np.testing.assert_allclose(po.left[i], po.left[i].T, atol=0)
            np.testing.assert_allclose(po.right[i], pr.T @ b.toarray() @ pr, rtol=1e-12, atol=1e-14)

    def test_width_mismatch(self, rng):
        p = gen_random_spd(6, 6, 1, seed=0)
        with pytest.raises(ValueError):
            project_operator(p.operator, _basis(rng, 6, 2), _basis(rng, 6, 3))


class TestHessian:
    def test_identity(self):
        po = ProjectedOperator((np.eye(2),), (np.eye(2),))
        np.testing.assert_allclose(assemble_hessian(po).matrix, np.eye(4))

    def test_matches_kron_sum(self, rng):
        po = _spd_projected(rng, 2, 2)
        ref = sum(np.kron(b, a) for a, b in zip(po.left, po.right))
        np.testing.assert_allclose(assemble_hessian(po).matrix, ref, atol=1e-14)

    def test_indefinite(self):
        po = ProjectedOperator((np.diag([-5.0, 1.0]), np.eye(2)), (np.eye(2), np.eye(2) * 0.1))
        with pytest.raises(ReducedSolveError, match="smallest pivot"):
            assemble_hessian(po)

    def test_size_cap(self):
        po = ProjectedOperator((np.eye(5),), (np.eye(5),))
        with pytest.raises(ReducedProblemTooLarge, match="lower maxrank"):
            assemble_hessian(po, kron_cap=16)


class TestAlpha:
    def test_identity_operator(self, rng):
        po = ProjectedOperator((np.eye(3),), (np.eye(3),))
        rhs = rng.standard_normal((3, 3))
        alpha, varrho = solve_alpha(assemble_hessian(po), rhs)
        np.testing.assert_allclose(alpha, rhs, atol=1e-15)
        assert varrho <= 1e-14

    def test_zero_rhs(self, rng):
        alpha, _ = solve_alpha(assemble_hessian(_spd_projected(rng, 3, 2)), np.zeros((3, 3)))
        assert np.all(alpha == 0)

    def test_matches_dense_kron(self, rng):
        po = _spd_projected(rng, 3, 3)
        rhs = rng.standard_normal((3, 3))
        h = assemble_hessian(po)
        alpha, varrho = solve_alpha(h, rhs)
        ref = np.linalg.solve(h.matrix, rhs.reshape(-1, order="F")).reshape(3, 3, order="F")
        assert np.linalg.norm(alpha - ref) <= 1e-12 * np.linalg.norm(ref)
        assert varrho <= 1e-11 * np.linalg.norm(rhs)

    def test_galerkin_condition(self, rng):
        p = gen_random_spd(15, 12, 3, seed=2)
        pl, pr = _basis(rng, 15, 4), _basis(rng, 12, 4)
        r = random_triple(rng, 15, 12, 3).to_dense()
        h = assemble_hessian(project_operator(p.operator, pl, pr))
        rhs = pl.T @ r @ pr
        alpha, _ = solve_alpha(h, rhs)
        new_r = r - _dense_apply(p.operator, pl @ alpha @ pr.T)
        assert np.linalg.norm(pl.T @ new_r @ pr) <= 1e-11 * np.linalg.norm(rhs)

    def test_basis_invariance(self, rng):
        p = gen_random_spd(20, 18, 3, seed=9)
        pl, pr = _basis(rng, 20, 3), _basis(rng, 18, 3)
        r = random_triple(rng, 20, 18, 2).to_dense()
        q = _basis(rng, 3, 3)

        def update(bl, br):
            h = assemble_hessian(project_operator(p.operator, bl, br))
            alpha, _ = solve_alpha(h, bl.T @ r @ br)
            return bl @ alpha @ br.T

        a, b = update(pl, pr), update(pl @ q, pr @ q)
        assert np.linalg.norm(a - b) <= 1e-11 * np.linalg.norm(a)


class TestBeta:
    def test_zero_direction(self, rng):
        p = gen_random_spd(8, 8, 2, seed=1)
        pl, pr = _basis(rng, 8, 2), _basis(rng, 8, 2)
        h = assemble_hessian(project_operator(p.operator, pl, pr))
        beta, _ = solve_beta(h, p.operator, LowRankTriple.zero(8, 8), pl, pr)
        assert np.all(beta == 0)

    def test_already_orthogonal(self, rng):
        p = gen_random_spd(12, 12, 2, seed=4)
        pl, pr = _basis(rng, 12, 2), _basis(rng, 12, 2)
        h = assemble_hessian(project_operator(p.operator, pl, pr))
        z0 = random_triple(rng, 12, 12, 2)
        # remove the L-component along the P subspace: Z = Z0 - P gamma P^T
        gamma = h.solve(projected_operator_rhs(p.operator, z0, pl, pr))
        z = LowRankTriple.from_factors(np.hstack([z0.left, pl]), np.hstack([z0.right, pr]),
                                       np.block([[z0.core, np.zeros((2, 2))], [np.zeros((2, 2)), -gamma]]))
        beta, _ = solve_beta(h, p.operator, z, pl, pr)
        assert np.linalg.norm(beta) <= 1e-12 * np.linalg.norm(z.core)

    def test_new_direction_is_l_orthogonal(self, rng):
        p = gen_random_spd(10, 10, 2, seed=6)
        pl, pr = _basis(rng, 10, 2), _basis(rng, 10, 2)
        h = assemble_hessian(project_operator(p.operator, pl, pr))
        z = random_triple(rng, 10, 10, 2)
        beta, _ = solve_beta(h, p.operator, z, pl, pr)
        lp = _dense_apply(p.operator, z.to_dense() + pl @ beta @ pr.T)
        assert np.linalg.norm(pl.T @ lp @ pr) <= 1e-11 * np.linalg.norm(lp)

    def test_printed_variant_and_unknown(self, rng):
        p = gen_random_spd(10, 10, 2, seed=6)
        pl, pr = _basis(rng, 10, 2), _basis(rng, 10, 2)
        h = assemble_hessian(project_operator(p.operator, pl, pr))
        z = random_triple(rng, 10, 10, 2)
        beta, _ = solve_beta(h, p.operator, z, pl, pr, variant="printed")
        np.testing.assert_allclose(h.projected.apply(beta), pl.T @ z.to_dense() @ pr, atol=1e-12)
        with pytest.raises(ValueError):
            solve_beta(h, p.operator, z, pl, pr, variant="other")
