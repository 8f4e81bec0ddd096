"""Projected multiterm equations for the step matrices alpha and beta.

With direction bases ``P^l`` (``n_A x s``) and ``P^r`` (``n_B x s``) both
reduced equations read ``sum_i At_i Y Bt_i = F`` with ``At_i = P^l' A_i P^l``
and ``Bt_i = P^r' B_i P^r``.  They share one ``s^2 x s^2`` Kronecker matrix,
which is assembled and Cholesky-factored once per iteration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .lowrank import LowRankTriple, MultitermOperator

__all__ = [
    "KRON_CAP",
    "ReducedSolveError",
    "ReducedProblemTooLarge",
    "ProjectedOperator",
    "KronHessian",
    "project_operator",
    "assemble_hessian",
    "solve_alpha",
    "solve_beta",
    "projected_operator_rhs",
]

KRON_CAP = 4096


class ReducedSolveError(RuntimeError):
    """The projected problem is too large or not positive definite."""


class ReducedProblemTooLarge(ReducedSolveError):
    """The Kronecker matrix would exceed the configured size cap."""


@dataclass(frozen=True, eq=False)
class ProjectedOperator:
    left: tuple
    right: tuple

    @property
    def dim(self) -> int:
        return self.left[0].shape[0]

    @property
    def n_terms(self) -> int:
        return len(self.left)

    def apply(self, y: np.ndarray) -> np.ndarray:
        return sum(a @ y @ b for a, b in zip(self.left, self.right))


@dataclass(frozen=True, eq=False)
class KronHessian:
    matrix: np.ndarray
    factor: tuple
    projected: ProjectedOperator

    @property
    def dim(self) -> int:
        return self.projected.dim

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        s = self.dim
        vec = sla.cho_solve(self.factor, rhs.reshape(-1, order="F"))
        return vec.reshape((s, s), order="F")


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def project_operator(op: MultitermOperator, pl: np.ndarray, pr: np.ndarray) -> ProjectedOperator:
    """``(P^l' A_i P^l, P^r' B_i P^r)`` for every term."""
    if pl.shape[1] != pr.shape[1]:
        raise ValueError(f"basis widths differ: {pl.shape[1]} vs {pr.shape[1]}")
    if pl.shape[1] == 0:
        raise ValueError("empty direction basis")
    left = tuple(_sym(pl.T @ (a @ pl)) for a in op.left)
    right = tuple(_sym(pr.T @ (b @ pr)) for b in op.right)
    return ProjectedOperator(left, right)


def assemble_hessian(po: ProjectedOperator, kron_cap: int = KRON_CAP) -> KronHessian:
    """``H = sum_i Bt_i (x) At_i``, symmetrized and Cholesky-factored."""
    s = po.dim
    if s * s > kron_cap:
        raise ReducedProblemTooLarge(
            f"reduced problem too large; lower maxrank (s_k^2 = {s * s} > {kron_cap})")
    h = np.zeros((s * s, s * s))
    for a, b in zip(po.left, po.right):
        h += np.kron(b, a)
    h = _sym(h)
    try:
        factor = sla.cho_factor(h, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, sla.LinAlgError):
        smallest = float(np.linalg.eigvalsh(h)[0])
        raise ReducedSolveError(
            f"projected operator is not positive definite (smallest pivot {smallest:.3e})") from None
    return KronHessian(h, factor, po)


def solve_alpha(h: KronHessian, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    """Step matrix ``alpha`` and the norm of its reduced residual ``varrho``."""
    alpha = h.solve(rhs)
    varrho = float(np.linalg.norm(rhs - h.projected.apply(alpha)))
    return alpha, varrho


def projected_operator_rhs(op: MultitermOperator, z: LowRankTriple,
                           pl: np.ndarray, pr: np.ndarray) -> np.ndarray:
    """``P^l' L(Z) P^r`` from the factors of ``Z``, one term at a time."""
    s = pl.shape[1]
    out = np.zeros((s, s))
    if z.rank == 0:
        return out
    for a, b in zip(op.left, op.right):
        out += ((a @ pl).T @ z.left) @ z.core @ (z.right.T @ (b @ pr))
    return out


def solve_beta(h: KronHessian, op: MultitermOperator, z: LowRankTriple,
               pl: np.ndarray, pr: np.ndarray, variant: str = "derivation") -> tuple[np.ndarray, float]:
    """Step matrix ``beta`` making ``Z + P^l beta P^r'`` L-orthogonal to the old directions.

    ``variant="printed"`` uses ``+P^l' Z P^r`` as right-hand side instead of
    ``-P^l' L(Z) P^r``; it does not yield L-orthogonal directions and exists
    only for comparison runs.
    """
    if variant == "derivation":
        rhs = -projected_operator_rhs(op, z, pl, pr)
    elif variant == "printed":
        rhs = (pl.T @ z.left) @ z.core @ (z.right.T @ pr) if z.rank else np.zeros((pl.shape[1],) * 2)
    else:
        raise ValueError(f"unknown beta variant {variant!r}")
    beta = h.solve(rhs)
    varrho = float(np.linalg.norm(rhs - h.projected.apply(beta)))
    return beta, varrho
