"""Test problems, the dense Kronecker oracle and block-Krylov bases."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .lowrank import LowRankTriple, MultitermOperator, as_sym_sparse

__all__ = [
    "ProblemInstance",
    "gen_diffusion_reaction",
    "gen_heat1",
    "gen_synthetic_kl",
    "gen_random_spd",
    "dense_kron_solve",
    "build_subspace",
    "laplacian_1d",
    "laplacian_2d",
    "ORACLE_CAP",
]

ORACLE_CAP = 10_000


@dataclass(eq=False)
class ProblemInstance:
    """An operator, a factored right-hand side and preconditioner data.

    ``precond_terms`` maps ``"p1"`` to ``(E, D)`` and ``"p2"`` to ``(M1, M2)``
    when the problem has a natural choice for them.
    """

    operator: MultitermOperator
    rhs: LowRankTriple
    metadata: dict = field(default_factory=dict)
    precond_terms: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.metadata.get("name", "problem")


def laplacian_1d(n: int, h: float | None = None) -> sp.csr_matrix:
    """``tridiag(-1, 2, -1) / h^2`` with ``h = 1/(n+1)`` by default."""
    h = 1.0 / (n + 1) if h is None else h
    e = np.ones(n)
    return (sp.diags([-e[1:], 2 * e, -e[1:]], [-1, 0, 1]) / h ** 2).tocsr()


def laplacian_2d(m1: int, m2: int | None = None) -> sp.csr_matrix:
    """5-point Dirichlet Laplacian on an ``m1 x m2`` interior grid of the unit square."""
    m2 = m1 if m2 is None else m2
    t1 = laplacian_1d(m1)
    t2 = laplacian_1d(m2)
    return (sp.kron(sp.identity(m2), t1) + sp.kron(t2, sp.identity(m1))).tocsr()


def gen_diffusion_reaction(n: int, gamma_kind: str = "sin") -> ProblemInstance:
    """``A X + X A + M X M = 1 1^T`` from a separable diffusion-reaction PDE.

    ``A`` discretizes ``(theta(z) u')'`` with ``theta(z) = -exp(-z)/10`` by
    centered differences at the midpoints; ``M = diag(gamma0(x_i))`` with
    ``gamma0`` either ``sin(pi z)`` or ``exp(pi z)``.
    """
    if n < 3:
        raise ValueError("need at least 3 grid points")
    h = 1.0 / (n + 1)
    x = h * np.arange(1, n + 1)
    theta = lambda z: -0.1 * np.exp(-z)  # noqa: E731
    lo = theta(x - h / 2)
    hi = theta(x + h / 2)
    a = sp.diags([hi[:-1], -(lo + hi), hi[:-1]], [-1, 0, 1]) / h ** 2
    if gamma_kind == "sin":
        g = np.sin(np.pi * x)
    elif gamma_kind == "exp":
        g = np.exp(np.pi * x)
    else:
        raise ValueError(f"gamma_kind must be 'sin' or 'exp', got {gamma_kind!r}")
    a = as_sym_sparse(a)
    m = sp.diags(g).tocsr()
    eye = sp.identity(n, format="csr")
    op = MultitermOperator([a, eye, m], [eye, a, m])
    ones = np.ones((n, 1))
    rhs = LowRankTriple.from_factors(ones, ones)
    meta = {"name": "diffusion_reaction", "n": n, "gamma_kind": gamma_kind}
    return ProblemInstance(op, rhs, meta, {"p1": (a, eye), "p2": (a, a)})


def gen_heat1(n0: int, delta: float = 0.5) -> ProblemInstance:
    """``A X + X A + M X M = c c^T`` on an ``n0 x n0`` grid, ``n_A = n0^2``.

    ``A`` is the 5-point Laplacian and ``M = N N^T`` with ``N`` a scaled
    selector of the ``n0`` nodes next to the ``x = 1`` side, so ``rank(M) = n0``.
    """
    if n0 < 3:
        raise ValueError("need n0 >= 3")
    if delta <= 0:
        raise ValueError("delta must be positive")
    h = 1.0 / (n0 + 1)
    a = laplacian_2d(n0)
    n = n0 * n0
    # grid index i + n0*j, i along x; the Robin side is i = n0 - 1
    side = (n0 - 1) + n0 * np.arange(n0)
    diag = np.zeros(n)
    diag[side] = delta / h
    m = sp.diags(diag).tocsr()
    eye = sp.identity(n, format="csr")
    op = MultitermOperator([a, eye, m], [eye, a, m])
    c = np.ones((n, 1)) / np.sqrt(n)
    rhs = LowRankTriple.from_factors(c, c)
    meta = {"name": "heat1", "n0": n0, "delta": delta}
    return ProblemInstance(op, rhs, meta, {"p1": (a, eye), "p2": (a, a)})


def _grid_shape(n: int) -> tuple[int, int]:
    m1 = int(np.floor(np.sqrt(n)))
    while n % m1:
        m1 -= 1
    return m1, n // m1


def _weighted_laplacian(m1: int, m2: int, rng: np.random.Generator) -> tuple[sp.csr_matrix, float]:
    """Grid graph Laplacian with edge weights drawn from ``[-1, 1]``, scaled by ``1/h^2``."""
    h = 1.0 / (max(m1, m2) + 1)
    idx = np.arange(m1 * m2).reshape(m2, m1)
    edges = np.vstack([
        np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()]),
        np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()]),
    ])
    w = rng.uniform(-1.0, 1.0, len(edges))
    n = m1 * m2
    i, j = edges[:, 0], edges[:, 1]
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([w, w, -w, -w])
    lap = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr() / h ** 2
    return lap, float(np.max(np.abs(w))) if len(w) else 0.0


def _legendre_moment(n: int) -> sp.csr_matrix:
    """Jacobi matrix of the Legendre polynomials; eigenvalues are Gauss nodes in (-1, 1)."""
    k = np.arange(1, n)
    off = k / np.sqrt(4.0 * k ** 2 - 1.0)
    return sp.diags([off, off], [-1, 1]).tocsr()


def gen_synthetic_kl(n_a: int, n_b: int, n_terms: int, decay: str = "fast", seed: int = 0,
                     sigma: float = 0.2) -> ProblemInstance:
    """Stochastic-Galerkin-shaped ``sum_j A_j X B_j = f0 e1^T``.

    ``A_1`` is a 2D Laplacian (grid shape chosen from ``n_a``), ``B_1 = I``;
    for ``j >= 2`` ``A_j`` is a randomly weighted grid Laplacian scaled by
    ``sigma * sqrt(lambda_j)`` with ``lambda_j = j^-2`` (fast) or ``j^-1``
    (slow), and ``B_j`` a randomly permuted Legendre Jacobi matrix.

    Every ``A_j`` satisfies ``-c_j A_1 <= A_j <= c_j A_1`` with
    ``c_j = sigma sqrt(lambda_j) max|w|``, so the operator is positive
    definite as soon as ``sum_j c_j ||B_j|| < 1``; this is checked.
    """
    if n_terms < 2:
        raise ValueError("need at least two terms")
    if decay not in ("fast", "slow"):
        raise ValueError(f"decay must be 'fast' or 'slow', got {decay!r}")
    rng = np.random.default_rng(seed)
    m1, m2 = _grid_shape(n_a)
    a1 = laplacian_2d(m1, m2)
    left = [a1]
    right = [sp.identity(n_b, format="csr")]
    base = _legendre_moment(n_b)
    bnorm = float(np.max(np.abs(np.linalg.eigvalsh(base.toarray())))) if n_b > 1 else 0.0
    bound = 0.0
    for j in range(2, n_terms + 1):
        lam = j ** -2.0 if decay == "fast" else 1.0 / j
        lap, wmax = _weighted_laplacian(m1, m2, rng)
        scale = sigma * np.sqrt(lam)
        left.append(scale * lap)
        perm = rng.permutation(n_b)
        right.append(base[perm][:, perm].tocsr())
        bound += scale * wmax * bnorm
    if bound >= 1.0:
        raise ValueError(f"positive definiteness not guaranteed (dominance bound {bound:.3f} >= 1); "
                         "use a smaller sigma")
    op = MultitermOperator(left, right)
    f0 = np.ones((n_a, 1)) / np.sqrt(n_a)
    e1 = np.zeros((n_b, 1))
    e1[0] = 1.0
    rhs = LowRankTriple.from_factors(f0, e1)
    meta = {"name": "synthetic_kl", "n_a": n_a, "n_b": n_b, "n_terms": n_terms, "decay": decay,
            "seed": seed, "sigma": sigma, "dominance_bound": bound}
    eye_b = sp.identity(n_b, format="csr")
    return ProblemInstance(op, rhs, meta, {"p1": (a1, eye_b)})


def gen_random_spd(n_a: int, n_b: int, n_terms: int, rhs_rank: int = 1, seed: int = 0,
                   density: float = 0.3) -> ProblemInstance:
    """Small random positive definite multiterm problem.

    The first term is ``(A_1, B_1)`` with both SPD and well conditioned; the
    others are random symmetric sparse pairs scaled so their Kronecker norms
    sum to half of ``lambda_min(B_1 (x) A_1)``.
    """
    rng = np.random.default_rng(seed)

    def spd(n):
        g = rng.standard_normal((n, n))
        return g @ g.T / n + np.eye(n)

    def sym(n):
        m = sp.random(n, n, density=density, random_state=rng).toarray()
        m = m + m.T + np.diag(rng.standard_normal(n))
        return m

    a1, b1 = spd(n_a), spd(n_b)
    lam_min = np.linalg.eigvalsh(a1)[0] * np.linalg.eigvalsh(b1)[0]
    left, right = [a1], [b1]
    share = 0.5 * lam_min / max(n_terms - 1, 1)
    for _ in range(n_terms - 1):
        a, b = sym(n_a), sym(n_b)
        na, nb = np.linalg.norm(a, 2), np.linalg.norm(b, 2)
        if na == 0 or nb == 0:
            continue
        left.append(a * np.sqrt(share) / na)
        right.append(b * np.sqrt(share) / nb)
    op = MultitermOperator([sp.csr_matrix(m) for m in left], [sp.csr_matrix(m) for m in right])
    rhs = LowRankTriple.from_factors(rng.standard_normal((n_a, rhs_rank)),
                                     rng.standard_normal((n_b, rhs_rank)))
    meta = {"name": "random_spd", "n_a": n_a, "n_b": n_b, "n_terms": n_terms, "seed": seed}
    return ProblemInstance(op, rhs, meta, {"p1": (left[0], right[0])})


def dense_kron_solve(p: ProblemInstance | MultitermOperator, rhs: LowRankTriple | None = None) -> np.ndarray:
    """Dense ``X`` with ``sum_i A_i X B_i = C`` via the Kronecker system."""
    op = p.operator if isinstance(p, ProblemInstance) else p
    c = p.rhs if isinstance(p, ProblemInstance) else rhs
    n_a, n_b = op.shape
    if n_a * n_b > ORACLE_CAP:
        raise ValueError(f"oracle limited to n_A*n_B <= {ORACLE_CAP}, got {n_a * n_b}")
    k = op.kron_matrix()
    vec = c.to_dense().reshape(-1, order="F")
    try:
        sol = sla.solve(k, vec, assume_a="sym")
    except sla.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"Kronecker system is singular: {exc}") from None
    return sol.reshape((n_a, n_b), order="F")


def build_subspace(op: MultitermOperator, r0: np.ndarray, k: int, side: str = "left",
                   rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of ``range([R0, M.R0, M.(M.R0), ...])`` up to level ``k``.

    ``M.V`` means ``[M_1 V, ..., M_l V]`` over the left (``A_i``) or right
    (``B_i``) matrices.  Directions whose component outside the current basis
    is below ``rtol`` times the block norm are dropped.
    """
    mats = op.left if side == "left" else op.right
    r0 = np.asarray(r0, dtype=float)
    r0 = r0.reshape(-1, 1) if r0.ndim == 1 else r0
    basis = _orth(r0, rtol)
    level = basis
    for _ in range(k):
        if level.shape[1] == 0:
            break
        cand = np.hstack([m @ level for m in mats])
        scale = max(np.linalg.norm(cand, 2), 1e-300)
        for _ in range(2):
            cand = cand - basis @ (basis.T @ cand)
        u, s, _ = np.linalg.svd(cand, full_matrices=False)
        keep = int(np.sum(s > rtol * scale))
        level = u[:, :keep]
        basis = np.hstack([basis, level])
    return basis


def _orth(m: np.ndarray, rtol: float) -> np.ndarray:
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((m.shape[0], 0))
    return u[:, : int(np.sum(s > rtol * s[0]))]
