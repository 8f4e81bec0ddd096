"""Truncated preconditioned CG with scalar coefficients on factored iterates.

Without truncation this is ordinary PCG on the Kronecker system; every
update is followed by a QR-SVD recompression to keep ranks bounded.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .lowrank import (
    BlockFactorization,
    LowRankTriple,
    MultitermOperator,
    _blkdiag,
    frob_norm_factored,
    inner_product_factored,
)
from .solver import (
    ConvergenceReport,
    IterationRecord,
    SolverConfig,
    _finish,
    _precondition,
    _rel_change,
    compute_residual,
)
from .truncation import SketchPair, truncate_qrsvd

__all__ = ["solve_tpcg", "operator_energy"]


def operator_energy(op: MultitermOperator, p: LowRankTriple) -> float:
    """``<P, L(P)>`` from ``r x r`` projections of each term."""
    if p.rank == 0:
        return 0.0
    total = 0.0
    for a, b in zip(op.left, op.right):
        pa = p.left.T @ (a @ p.left)
        pb = p.right.T @ (b @ p.right)
        total += np.trace(p.core.T @ pa @ p.core @ pb)
    return float(total)


def solve_tpcg(op: MultitermOperator, c: LowRankTriple, x0: LowRankTriple | None = None,
               cfg: SolverConfig | None = None,
               monitor: Callable[[dict], None] | None = None
               ) -> tuple[LowRankTriple, ConvergenceReport]:
    """Truncated PCG with Fletcher-Reeves ``beta = <Z', R'> / <Z, R>``.

    Uses the same residual strategies, preconditioners and stopping rule as
    :func:`sscg.solver.solve_sscg`.  ``monitor`` receives a dict with keys
    ``k``, ``alpha``, ``beta``, ``x``, ``r`` after every iteration.
    """
    cfg = cfg or SolverConfig()
    params = cfg.truncation
    n_a, n_b = op.shape
    x = LowRankTriple.zero(n_a, n_b) if x0 is None else x0
    report = ConvergenceReport(method="tpcg")
    if c.rank == 0 or frob_norm_factored(c) == 0.0:
        report.status = "converged"
        report.final_true_relres = 0.0
        report.message = "zero right-hand side"
        return x, report

    sketch = None
    if cfg.residual_strategy == "randomized":
        sketch = SketchPair.generate(n_a, n_b, params.maxrank_r, cfg.seed)

    t_start = time.perf_counter()
    r = compute_residual(op, c, x, cfg, sketch)
    if r.rank == 0:
        report.status = "converged"
        report.message = "initial residual is zero"
        _finish(op, c, x, cfg, report)
        return x, report
    z = _precondition(cfg, r, False)
    p = z
    zr = inner_product_factored(z, r)

    for k in range(cfg.maxit):
        t_it = time.perf_counter()
        curv = operator_energy(op, p)
        if not curv > 0.0:
            report.status = "reduced_solve_failure"
            report.message = f"non-positive curvature <P, L(P)> = {curv:.3e}"
            break
        alpha = zr / curv
        x_new = truncate_qrsvd(BlockFactorization([x.left, p.left], _blkdiag([x.core, alpha * p.core]),
                                                  [x.right, p.right]), params)
        change = _rel_change(x, x_new)
        rec = IterationRecord(iter=k + 1, rel_change=change, rank_X=x_new.rank, rank_P=p.rank,
                              rank_R=r.rank, tail_X=x_new.tail, tail_R=r.tail, rho_diag=0.0,
                              millis=0.0, res_norm=frob_norm_factored(r))
        x = x_new
        report.iterations = k + 1
        info = {"k": k, "alpha": alpha, "beta": None, "x": x, "r": None}
        if change <= cfg.tol:
            report.status = "converged"
        else:
            r = compute_residual(op, c, x, cfg, sketch)
            info["r"] = r
            if r.rank == 0:
                report.status = "converged"
                report.message = "residual vanished"
            else:
                z = _precondition(cfg, r, False)
                zr_new = inner_product_factored(z, r)
                beta = zr_new / zr
                zr = zr_new
                info["beta"] = beta
                p = truncate_qrsvd(BlockFactorization([z.left, p.left], _blkdiag([z.core, beta * p.core]),
                                                      [z.right, p.right]), params)
        rec.millis = 1e3 * (time.perf_counter() - t_it)
        report.records.append(rec)
        if monitor:
            monitor(info)
        if report.status == "converged":
            break
    report.total_millis = 1e3 * (time.perf_counter() - t_start)
    _finish(op, c, x, cfg, report)
    return x, report
