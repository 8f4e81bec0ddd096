"""Preconditioned subspace-conjugate gradient driver.

Each iteration solves two small projected equations (for the step matrices
``alpha`` and ``beta``) instead of computing scalar CG coefficients, so the
search direction is a whole subspace ``range(P^l) x range(P^r)``.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .galerkin import (
    KRON_CAP,
    ReducedSolveError,
    ReducedProblemTooLarge,
    assemble_hessian,
    project_operator,
    solve_alpha,
    solve_beta,
)
from .lowrank import (
    BlockFactorization,
    LowRankTriple,
    MultitermOperator,
    _blkdiag,
    _stacked_diff_norm,
    frob_norm_factored,
    inner_product_factored,
    relative_change,
)
from .precond import PreconditionerSpec, apply_inverse
from .truncation import (
    SketchPair,
    TruncationParams,
    residual_dynamic,
    residual_full,
    residual_randomized,
    symmetrize,
    true_relative_residual,
    truncate_qrsvd,
    truncate_symmetric,
)

__all__ = [
    "SolverConfig",
    "IterationRecord",
    "IterationState",
    "ConvergenceReport",
    "solve_sscg",
    "solve_sscg_symmetric",
    "check_descent",
    "CSV_COLUMNS",
]

RESIDUAL_STRATEGIES = ("full", "dynamic", "randomized")
BETA_VARIANTS = ("derivation", "printed")
CSV_COLUMNS = ("iter", "rel_change", "rank_X", "rank_P", "rank_R", "tail_X", "tail_R",
               "rho_diag", "millis", "res_norm")
STAGNATION_WINDOW = 10


@dataclass
class SolverConfig:
    tol: float = 1e-6
    maxit: int = 100
    truncation: TruncationParams = field(default_factory=TruncationParams)
    residual_strategy: str = "full"
    seed: int = 0
    precond: PreconditionerSpec = field(default_factory=PreconditionerSpec.identity)
    beta_rhs_variant: str = "derivation"
    symmetric_mode: bool = False
    kron_cap: int = KRON_CAP
    final_residual: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.maxit < 1:
            raise ValueError(f"maxit must be >= 1, got {self.maxit}")
        if self.residual_strategy not in RESIDUAL_STRATEGIES:
            raise ValueError(f"residual_strategy must be one of {RESIDUAL_STRATEGIES}")
        if self.beta_rhs_variant not in BETA_VARIANTS:
            raise ValueError(f"beta_rhs_variant must be one of {BETA_VARIANTS}")


@dataclass
class IterationRecord:
    iter: int
    rel_change: float
    rank_X: int
    rank_P: int
    rank_R: int
    tail_X: float
    tail_R: float
    rho_diag: float
    millis: float
    res_norm: float


@dataclass
class IterationState:
    """Everything produced in one iteration, handed to a monitor callback.

    ``r``, ``z``, ``beta`` and ``p_next`` are ``None`` on the iteration that
    stops on the relative-change test.  ``p_next`` keeps its core even though
    the solver itself only uses its factors.
    """

    k: int
    p: LowRankTriple
    alpha: np.ndarray
    x_prev: LowRankTriple
    x: LowRankTriple
    r_prev: LowRankTriple
    r: Optional[LowRankTriple] = None
    z: Optional[LowRankTriple] = None
    beta: Optional[np.ndarray] = None
    p_next: Optional[LowRankTriple] = None


@dataclass
class ConvergenceReport:
    method: str = "sscg"
    status: str = "max_iterations"
    iterations: int = 0
    records: list = field(default_factory=list)
    final_true_relres: float = float("nan")
    relres_estimated: bool = False
    total_millis: float = 0.0
    annotations: list = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final_rel_change(self) -> float:
        return self.records[-1].rel_change if self.records else float("nan")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in self.records:
            row = asdict(rec)
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        return {
            "method": self.method,
            "status": self.status,
            "iterations": self.iterations,
            "final_true_relres": self.final_true_relres,
            "relres_estimated": self.relres_estimated,
            "total_millis": self.total_millis,
            "annotations": list(self.annotations),
            "message": self.message,
        }


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _trunc(bf: BlockFactorization, params: TruncationParams, symmetric: bool,
           rank_cap: int | None = None) -> LowRankTriple:
    if symmetric:
        return truncate_symmetric(bf, params, rank_cap=rank_cap)
    return truncate_qrsvd(bf, params, rank_cap=rank_cap)


def compute_residual(op: MultitermOperator, c: LowRankTriple, x: LowRankTriple,
                     cfg: SolverConfig, sketch: SketchPair | None,
                     symmetric: bool = False) -> LowRankTriple:
    """Compressed ``C - L(X)`` using the strategy named in ``cfg``."""
    params = cfg.truncation
    if cfg.residual_strategy == "full":
        return residual_full(op, c, x, params, symmetric=symmetric)
    if cfg.residual_strategy == "dynamic":
        r = residual_dynamic(op, c, x, params)
        return symmetrize(r, params, rank_cap=params.maxrank_r) if symmetric else r
    return residual_randomized(op, c, x, sketch, params, symmetric=symmetric)


def _precondition(cfg: SolverConfig, r: LowRankTriple, symmetric: bool) -> LowRankTriple:
    z = apply_inverse(cfg.precond, r, cfg.truncation)
    if symmetric and z.rank:
        z = symmetrize(z, cfg.truncation)
    return z


def _plateaued(changes: list, tol: float) -> bool:
    if len(changes) < STAGNATION_WINDOW:
        return False
    window = np.asarray(changes[-STAGNATION_WINDOW:])
    return bool(np.all(window > tol) and window.min() > 0.1 * window.max())


def _run(op: MultitermOperator, c: LowRankTriple, x0: LowRankTriple | None, cfg: SolverConfig,
         symmetric: bool, monitor: Callable | None, method: str) -> tuple[LowRankTriple, ConvergenceReport]:
    n_a, n_b = op.shape
    if c.shape != (n_a, n_b):
        raise ValueError(f"right-hand side is {c.shape}, operator acts on {(n_a, n_b)}")
    x = LowRankTriple.zero(n_a, n_b) if x0 is None else x0
    if x.shape != (n_a, n_b):
        raise ValueError(f"initial guess is {x.shape}, operator acts on {(n_a, n_b)}")
    report = ConvergenceReport(method=method)
    params = cfg.truncation

    if symmetric:
        c, x = _symmetric_inputs(op, c, x, params)

    if c.rank == 0 or frob_norm_factored(c) == 0.0:
        report.status = "converged"
        report.final_true_relres = 0.0
        report.message = "zero right-hand side"
        return x, report

    sketch = None
    if cfg.residual_strategy == "randomized":
        sketch = SketchPair.generate(n_a, n_b, params.maxrank_r, cfg.seed)

    t_start = time.perf_counter()
    r = compute_residual(op, c, x, cfg, sketch, symmetric)
    if r.rank == 0:
        report.status = "converged"
        report.message = "initial residual is zero"
        report.total_millis = 1e3 * (time.perf_counter() - t_start)
        _finish(op, c, x, cfg, report)
        return x, report
    z = _precondition(cfg, r, symmetric)
    p = z
    changes: list[float] = []

    for k in range(cfg.maxit):
        t_it = time.perf_counter()
        if p.rank == 0:
            report.status = "reduced_solve_failure"
            report.message = "search direction vanished after truncation"
            break
        pl, pr = p.left, p.right
        try:
            h = assemble_hessian(project_operator(op, pl, pr), cfg.kron_cap)
        except ReducedProblemTooLarge:
            raise
        except ReducedSolveError as exc:
            report.status = "reduced_solve_failure"
            report.message = str(exc)
            break
        rhs = (pl.T @ r.left) @ r.core @ (r.right.T @ pr)
        alpha, varrho = solve_alpha(h, rhs)
        if symmetric:
            alpha = 0.5 * (alpha + alpha.T)
        x_new = _trunc(BlockFactorization([x.left, pl], _blkdiag([x.core, alpha]), [x.right, pr]),
                       params, symmetric)
        change = _rel_change(x, x_new)
        changes.append(change)
        state = IterationState(k=k, p=p, alpha=alpha, x_prev=x, x=x_new, r_prev=r)
        rec = IterationRecord(iter=k + 1, rel_change=change, rank_X=x_new.rank, rank_P=p.rank,
                              rank_R=r.rank, tail_X=x_new.tail, tail_R=r.tail, rho_diag=varrho,
                              millis=0.0, res_norm=frob_norm_factored(r))
        x = x_new
        report.iterations = k + 1
        if change <= cfg.tol:
            rec.millis = 1e3 * (time.perf_counter() - t_it)
            report.records.append(rec)
            report.status = "converged"
            if monitor:
                monitor(state)
            break
        r = compute_residual(op, c, x, cfg, sketch, symmetric)
        state.r = r
        if r.rank == 0:
            rec.millis = 1e3 * (time.perf_counter() - t_it)
            report.records.append(rec)
            report.status = "converged"
            report.message = "residual vanished"
            if monitor:
                monitor(state)
            break
        z = _precondition(cfg, r, symmetric)
        beta, _ = solve_beta(h, op, z, pl, pr, variant=cfg.beta_rhs_variant)
        if symmetric:
            beta = 0.5 * (beta + beta.T)
        p_next = _trunc(BlockFactorization([z.left, pl], _blkdiag([z.core, beta]), [z.right, pr]),
                        params, symmetric)
        state.z, state.beta, state.p_next = z, beta, p_next
        p = p_next
        rec.millis = 1e3 * (time.perf_counter() - t_it)
        report.records.append(rec)
        if monitor:
            monitor(state)
        if _plateaued(changes, cfg.tol) and not report.annotations:
            report.annotations.append(
                f"stagnation: relative change plateaued above tol for {STAGNATION_WINDOW} "
                f"iterations at iteration {k + 1}; consider increasing maxrank")
    report.total_millis = 1e3 * (time.perf_counter() - t_start)
    _finish(op, c, x, cfg, report)
    return x, report


def _rel_change(x_prev: LowRankTriple, x_next: LowRankTriple) -> float:
    if x_next.rank == 0:
        return 0.0 if x_prev.rank == 0 else float("inf")
    return relative_change(x_prev, x_next)


def _finish(op, c, x, cfg, report):
    if not cfg.final_residual:
        return
    value, estimated = true_relative_residual(op, c, x, seed=cfg.seed)
    report.final_true_relres = value
    report.relres_estimated = estimated


def _symmetric_inputs(op, c, x, params):
    if not op.symmetric:
        raise ValueError("symmetric mode needs an operator with L(X)^T = L(X^T)")
    for name, m in (("right-hand side", c), ("initial guess", x)):
        if m.rank == 0:
            continue
        asym = _stacked_diff_norm(m, m.transpose())
        if asym > 1e-10 * frob_norm_factored(m):
            raise ValueError(f"{name} is not symmetric (||M - M^T||_F = {asym:.3e})")
    wide = TruncationParams(tolrank=min(params.tolrank, 1e-14), maxrank=max(1, 2 * c.rank))
    c_sym = symmetrize(c, wide, rank_cap=2 * c.rank) if c.rank else c
    if x.rank:
        x = symmetrize(x, TruncationParams(tolrank=params.tolrank, maxrank=max(1, 2 * x.rank)),
                       rank_cap=2 * x.rank)
    return c_sym, x


def solve_sscg(op: MultitermOperator, c: LowRankTriple, x0: LowRankTriple | None = None,
               cfg: SolverConfig | None = None,
               monitor: Callable[[IterationState], None] | None = None
               ) -> tuple[LowRankTriple, ConvergenceReport]:
    """Solve ``sum_i A_i X B_i = C`` with two-sided factored iterates.

    Parameters
    ----------
    op : MultitermOperator
        Symmetric positive definite multiterm operator.
    c : LowRankTriple
        Right-hand side.
    x0 : LowRankTriple, optional
        Initial guess; zero by default.
    cfg : SolverConfig, optional
        Tolerances, rank caps, residual strategy and preconditioner.  With
        ``cfg.symmetric_mode`` this dispatches to :func:`solve_sscg_symmetric`.
    monitor : callable, optional
        Called with an :class:`IterationState` after every iteration.

    Returns
    -------
    x : LowRankTriple
        Last iterate.
    report : ConvergenceReport
        Per-iteration records and the terminal status.
    """
    cfg = cfg or SolverConfig()
    if cfg.symmetric_mode:
        return solve_sscg_symmetric(op, c, x0, cfg, monitor)
    return _run(op, c, x0, cfg, False, monitor, "sscg")


def solve_sscg_symmetric(op: MultitermOperator, c: LowRankTriple, x0: LowRankTriple | None = None,
                         cfg: SolverConfig | None = None,
                         monitor: Callable[[IterationState], None] | None = None
                         ) -> tuple[LowRankTriple, ConvergenceReport]:
    """Single-factor variant for symmetric ``C`` and symmetry-preserving ``L``.

    Every iterate is stored as ``U core U^T`` with a symmetric, possibly
    indefinite core; ``left`` and ``right`` of each triple are the same array.
    """
    cfg = cfg or SolverConfig()
    return _run(op, c, x0, cfg, True, monitor, "sscg_sym")


def check_descent(r_next: LowRankTriple, p_next: LowRankTriple) -> float:
    """``|<grad Phi(X_{k+1}), P_{k+1}> + ||R_{k+1}||_F^2|``.

    The gradient of the energy functional is ``-R_{k+1}``.  The value is zero
    in exact arithmetic for unpreconditioned, untruncated iterations.
    """
    if r_next.rank == 0:
        return 0.0
    return abs(-inner_product_factored(r_next, p_next) + frob_norm_factored(r_next) ** 2)
