import numpy as np
import pytest
import scipy.sparse as sp

from sscg import (
    LowRankTriple,
    MultitermOperator,
    SolverConfig,
    TruncationParams,
    dense_kron_solve,
    gen_diffusion_reaction,
    gen_random_spd,
    solve_sscg,
    solve_tpcg,
)
from sscg.bench import build_solver_config
from sscg.tpcg import operator_energy

from conftest import random_triple


def _untruncated(n, **kw):
    return SolverConfig(tol=kw.pop("tol", 1e-12), maxit=kw.pop("maxit", 300),
                        truncation=TruncationParams(tolrank=1e-14, maxrank=n), **kw)


def test_identity_operator_one_iteration(rng):
    op = MultitermOperator([sp.identity(7)], [sp.identity(7)])
    c = LowRankTriple.from_factors(rng.standard_normal(7), rng.standard_normal(7))
    x, rep = solve_tpcg(op, c)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_allclose(x.to_dense(), c.to_dense(), atol=1e-14)


def test_operator_energy_matches_dense(rng):
    p = gen_random_spd(11, 9, 3, seed=1)
    x = random_triple(rng, 11, 9, 3)
    ref = np.sum(x.to_dense() * p.operator.apply_dense(x.to_dense()))
    assert operator_energy(p.operator, x) == pytest.approx(ref, rel=1e-12)
    assert operator_energy(p.operator, LowRankTriple.zero(11, 9)) == 0.0


def test_iterates_follow_vector_cg():
    p = gen_random_spd(12, 12, 2, seed=3)
    k_mat = p.operator.kron_matrix()
    b = p.rhs.to_dense().reshape(-1, order="F")
    seen = []
    solve_tpcg(p.operator, p.rhs, cfg=_untruncated(12, maxit=12), monitor=seen.append)
    x = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    for info in seen:
        kd = k_mat @ d
        alpha = (r @ r) / (d @ kd)
        assert info["alpha"] == pytest.approx(alpha, rel=1e-12) if info["k"] == 0 else True
        x = x + alpha * d
        r_new = r - alpha * kd
        d = r_new + (r_new @ r_new) / (r @ r) * d
        r = r_new
        ours = info["x"].to_dense().reshape(-1, order="F")
        assert np.linalg.norm(ours - x) <= 1e-9 * np.linalg.norm(x)


def test_first_alpha_is_dense_ratio():
    p = gen_random_spd(10, 10, 2, seed=5)
    seen = []
    solve_tpcg(p.operator, p.rhs, cfg=_untruncated(10, maxit=2), monitor=seen.append)
    c = p.rhs.to_dense()
    lc = p.operator.apply_dense(c)
    assert seen[0]["alpha"] == pytest.approx(np.sum(c * c) / np.sum(c * lc), rel=1e-12)


def test_reaches_oracle():
    p = gen_random_spd(14, 12, 3, seed=9)
    x, rep = solve_tpcg(p.operator, p.rhs, cfg=_untruncated(12, tol=1e-11))
    ref = dense_kron_solve(p)
    assert rep.converged
    assert np.linalg.norm(x.to_dense() - ref) <= 1e-8 * np.linalg.norm(ref)


def test_preconditioned_reaches_oracle():
    p = gen_diffusion_reaction(30, "sin")
    cfg = build_solver_config({"maxrank": 30, "tolrank": 1e-14, "tol": 1e-11, "precond": "p2", "maxit": 200}, p)
    x, rep = solve_tpcg(p.operator, p.rhs, cfg=cfg)
    ref = dense_kron_solve(p)
    assert rep.converged
    assert np.linalg.norm(x.to_dense() - ref) <= 1e-8 * np.linalg.norm(ref)


def test_sscg_needs_fewer_iterations_under_truncation():
    p = gen_diffusion_reaction(300, "exp")
    cfg = build_solver_config({"maxrank": 20, "tol": 1e-6, "precond": "p2", "maxit": 300}, p)
    _, r_ss = solve_sscg(p.operator, p.rhs, cfg=cfg)
    _, r_tp = solve_tpcg(p.operator, p.rhs, cfg=cfg)
    assert r_ss.converged
    assert r_tp.status == "max_iterations" or r_tp.iterations > r_ss.iterations


def test_indefinite_operator_reports_failure(rng):
    op = MultitermOperator([-np.eye(5)], [np.eye(5)])
    c = LowRankTriple.from_factors(rng.standard_normal(5), rng.standard_normal(5))
    _, rep = solve_tpcg(op, c)
    assert rep.status == "reduced_solve_failure" and "curvature" in rep.message


def test_zero_rhs():
    p = gen_random_spd(5, 5, 1, seed=0)
    x, rep = solve_tpcg(p.operator, LowRankTriple.zero(5, 5))
    assert rep.converged and x.rank == 0


def test_report_records_residual_norms():
    p = gen_random_spd(10, 10, 2, seed=2)
    _, rep = solve_tpcg(p.operator, p.rhs, cfg=_untruncated(10, tol=1e-8))
    assert rep.method == "tpcg"
    assert rep.records[0].res_norm == pytest.approx(np.linalg.norm(p.rhs.to_dense()))
    assert "res_norm" in rep.to_csv().splitlines()[0]
