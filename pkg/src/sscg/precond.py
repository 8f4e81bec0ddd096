"""Inverse preconditioners applied to factored residuals.

``one_term``     ``P(X) = E X D``, inverse ``E^{-1} X D^{-1}``.
``two_term_adi`` ``P(X) = M1 X + X M2``, inverse approximated by ``t``
                 steps of factored ADI with the same shifts on both sides.

Both return the result in the form ``[H_1 R^l, ...] kappa [K_1 R^r, ...]^T``
and recompress it with the QR-SVD truncation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import ellipj, ellipk

from .lowrank import BlockFactorization, LowRankTriple, as_sym_sparse, _blkdiag
from .truncation import TruncationParams, truncate_qrsvd

__all__ = [
    "PreconditionerSpec",
    "apply_p1_inverse",
    "apply_p2_adi_inverse",
    "apply_inverse",
    "wachspress_shifts",
    "elliptic_shifts",
    "estimate_spectral_interval",
]

_DENSE_EIG_LIMIT = 400
SHIFT_RULES = ("geometric", "elliptic")


def _factorize(m):
    m = sp.csc_matrix(m)
    try:
        lu = spla.splu(m)
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(f"factorization failed: {exc}") from None
    diag_u = lu.U.diagonal()
    if np.any(diag_u == 0) or not np.all(np.isfinite(diag_u)):
        raise np.linalg.LinAlgError("matrix is singular")
    return lu


@dataclass(eq=False)
class PreconditionerSpec:
    """Which preconditioner to use, its matrices and cached factorizations.

    Build through :meth:`identity`, :meth:`one_term` or :meth:`two_term_adi`.
    """

    kind: str = "identity"
    e: sp.csr_matrix | None = None
    d: sp.csr_matrix | None = None
    m1: sp.csr_matrix | None = None
    m2: sp.csr_matrix | None = None
    t_adi: int = 8
    interval1: tuple[float, float] | None = None
    interval2: tuple[float, float] | None = None
    truncate_steps: bool = False
    shift_rule: str = "geometric"
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def identity(cls) -> "PreconditionerSpec":
        return cls("identity")

    @classmethod
    def one_term(cls, e, d) -> "PreconditionerSpec":
        spec = cls("one_term", e=as_sym_sparse(e), d=as_sym_sparse(d))
        spec._cache["e"] = _factorize(spec.e)
        spec._cache["d"] = _factorize(spec.d)
        return spec

    @classmethod
    def two_term_adi(cls, m1, m2, t_adi: int = 8, interval1=None, interval2=None,
                     truncate_steps: bool = False, shift_rule: str = "geometric") -> "PreconditionerSpec":
        if t_adi < 1:
            raise ValueError("t_adi must be >= 1")
        if shift_rule not in SHIFT_RULES:
            raise ValueError(f"shift_rule must be one of {SHIFT_RULES}")
        m1 = as_sym_sparse(m1)
        m2 = as_sym_sparse(m2)
        interval1 = interval1 or estimate_spectral_interval(m1)
        same = m1.shape == m2.shape and (m1 != m2).nnz == 0
        interval2 = interval2 or (interval1 if same else estimate_spectral_interval(m2))
        return cls("two_term_adi", m1=m1, m2=m2, t_adi=t_adi, interval1=interval1,
                   interval2=interval2, truncate_steps=truncate_steps, shift_rule=shift_rule)

    def shifts(self) -> np.ndarray:
        lo = min(self.interval1[0], self.interval2[0])
        hi = max(self.interval1[1], self.interval2[1])
        if self.shift_rule == "elliptic":
            return elliptic_shifts(lo, hi, self.t_adi)
        return wachspress_shifts(lo, hi, self.t_adi)

    def shifted_solver(self, side: int, shift: float):
        key = (side, float(shift))
        if key not in self._cache:
            m = self.m1 if side == 1 else self.m2
            self._cache[key] = _factorize(m + shift * sp.identity(m.shape[0], format="csr"))
        return self._cache[key]


def wachspress_shifts(a: float, b: float, t: int) -> np.ndarray:
    """Log-uniform shifts ``a (b/a)^((2j-1)/(2t))``, ``j = 1..t``."""
    if a <= 0:
        raise ValueError(f"spectral lower bound must be positive, got {a}")
    if b < a:
        raise ValueError(f"empty interval [{a}, {b}]")
    if t < 1:
        raise ValueError("need at least one shift")
    j = np.arange(1, t + 1)
    return a * (b / a) ** ((2 * j - 1) / (2 * t))


def elliptic_shifts(a: float, b: float, t: int) -> np.ndarray:
    """Optimal real ADI shifts on ``[a, b]`` from Jacobi elliptic functions.

    ``p_j = b dn((2j-1) K / (2t), k)`` with modulus ``k = sqrt(1 - (a/b)^2)``;
    returned in increasing order.
    """
    if a <= 0:
        raise ValueError(f"spectral lower bound must be positive, got {a}")
    if b < a:
        raise ValueError(f"empty interval [{a}, {b}]")
    if t < 1:
        raise ValueError("need at least one shift")
    m = 1.0 - (a / b) ** 2
    if m <= 0.0:
        return np.full(t, float(a))
    kk = ellipk(m)
    u = (2 * np.arange(1, t + 1) - 1) * kk / (2 * t)
    _, _, dn, _ = ellipj(u, m)
    return np.sort(b * dn)


def estimate_spectral_interval(m) -> tuple[float, float]:
    """Bracket ``[lambda_min, lambda_max]`` of a sparse SPD matrix.

    Small matrices use a dense eigensolver; larger ones use Lanczos for the
    top end and shift-invert Lanczos about zero for the bottom end.  Both
    ends are widened slightly to absorb solver tolerance.
    """
    m = as_sym_sparse(m)
    n = m.shape[0]
    if n <= _DENSE_EIG_LIMIT:
        ev = np.linalg.eigvalsh(m.toarray())
        lo, hi = ev[0], ev[-1]
        widen = 1e-6
    else:
        # fixed start vector: ARPACK's default is random
        v0 = np.random.default_rng(0).standard_normal(n)
        hi = spla.eigsh(m, k=1, which="LA", return_eigenvectors=False, tol=1e-6, v0=v0)[0]
        try:
            lo = spla.eigsh(m.tocsc(), k=1, sigma=0.0, which="LM",
                            return_eigenvectors=False, tol=1e-8, v0=v0)[0]
        except (RuntimeError, spla.ArpackError):
            lo = -1.0
        widen = 1e-3
    if lo <= 0:
        raise ValueError("matrix not detected SPD")
    return float((1 - widen) * lo), float((1 + widen) * hi)


def _check_kind(spec: PreconditionerSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"preconditioner is {spec.kind!r}, expected {kind!r}")


def apply_p1_inverse(spec: PreconditionerSpec, r: LowRankTriple,
                     params: TruncationParams) -> LowRankTriple:
    _check_kind(spec, "one_term")
    if r.rank == 0:
        return r
    left = spec._cache["e"].solve(np.asarray(r.left))
    right = spec._cache["d"].solve(np.asarray(r.right))
    return truncate_qrsvd(BlockFactorization([left], r.core, [right]), params)


def apply_p2_adi_inverse(spec: PreconditionerSpec, r: LowRankTriple,
                         params: TruncationParams) -> LowRankTriple:
    """Approximate ``Z`` with ``M1 Z + Z M2 = R`` by factored ADI.

    With shifts ``p_1..p_t`` the iteration is

        V_1 = (M1 + p_1 I)^{-1} R^l,    W_1 = (M2 + p_1 I)^{-1} R^r,
        V_{j+1} = V_j - (p_j + p_{j+1}) (M1 + p_{j+1} I)^{-1} V_j,
        W_{j+1} = W_j - (p_j + p_{j+1}) (M2 + p_{j+1} I)^{-1} W_j,

    and ``Z = sum_j V_j (2 p_j rho) W_j^T``.  With ``truncate_steps`` the
    running sum is recompressed to ``maxrank`` after every step.
    """
    _check_kind(spec, "two_term_adi")
    if r.rank == 0:
        return r
    shifts = spec.shifts()
    v = w = None
    acc: LowRankTriple | None = None
    lblocks, rblocks, cores = [], [], []
    for j, p in enumerate(shifts):
        s1 = spec.shifted_solver(1, p)
        s2 = spec.shifted_solver(2, p)
        if j == 0:
            v = s1.solve(np.asarray(r.left))
            w = s2.solve(np.asarray(r.right))
        else:
            coef = shifts[j - 1] + p
            v = v - coef * s1.solve(v)
            w = w - coef * s2.solve(w)
        lblocks.append(v)
        rblocks.append(w)
        cores.append(2.0 * p * r.core)
        if spec.truncate_steps:
            if acc is not None:
                lblocks.insert(0, acc.left)
                rblocks.insert(0, acc.right)
                cores.insert(0, acc.core)
            acc = truncate_qrsvd(BlockFactorization(lblocks, _blkdiag(cores), rblocks), params)
            lblocks, rblocks, cores = [], [], []
    if spec.truncate_steps:
        return acc
    return truncate_qrsvd(BlockFactorization(lblocks, _blkdiag(cores), rblocks), params)


def apply_inverse(spec: PreconditionerSpec, r: LowRankTriple, params: TruncationParams) -> LowRankTriple:
    """``T(P^{-1}(R))`` for whichever preconditioner ``spec`` describes."""
    if spec.kind == "identity":
        if r.rank <= params.maxrank:
            return r
        return truncate_qrsvd(BlockFactorization([r.left], r.core, [r.right]), params)
    if spec.kind == "one_term":
        return apply_p1_inverse(spec, r, params)
    if spec.kind == "two_term_adi":
        return apply_p2_adi_inverse(spec, r, params)
    raise ValueError(f"unknown preconditioner kind {spec.kind!r}")
