"""Factored matrices and the multiterm operator acting on them.

A matrix ``X`` of size ``n_A x n_B`` is stored as ``X = left @ core @ right.T``
with column-orthonormal ``left``/``right`` and a small dense ``core``.  The
operator ``L(X) = sum_i A_i X B_i`` is never applied to a dense ``X`` outside
of the oracle helpers at the bottom of this module.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "as_sym_sparse",
    "MultitermOperator",
    "LowRankTriple",
    "BlockFactorization",
    "apply_operator_factored",
    "inner_product_factored",
    "frob_norm_factored",
    "relative_change",
    "energy_functional",
    "orthonormality_error",
]


def as_sym_sparse(m) -> sp.csr_matrix:
    """Return ``(m + m.T) / 2`` as a CSR matrix, rejecting non-finite entries."""
    m = sp.csr_matrix(m, dtype=float)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"coefficient matrix must be square, got {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise ValueError("coefficient matrix has non-finite entries")
    sym = ((m + m.T) * 0.5).tocsr()
    sym.eliminate_zeros()
    sym.sort_indices()
    return sym


@dataclass(frozen=True, eq=False)
class MultitermOperator:
    """``L(X) = A_1 X B_1 + ... + A_l X B_l`` with symmetric sparse terms."""

    left: tuple
    right: tuple

    def __init__(self, left: Sequence, right: Sequence):
        if len(left) != len(right):
            raise ValueError("left and right term lists differ in length")
        if len(left) < 1:
            raise ValueError("operator needs at least one term")
        lt = tuple(as_sym_sparse(a) for a in left)
        rt = tuple(as_sym_sparse(b) for b in right)
        n_a, n_b = lt[0].shape[0], rt[0].shape[0]
        for i, (a, b) in enumerate(zip(lt, rt)):
            if a.shape[0] != n_a:
                raise ValueError(f"term {i}: left matrix is {a.shape}, expected n_A={n_a}")
            if b.shape[0] != n_b:
                raise ValueError(f"term {i}: right matrix is {b.shape}, expected n_B={n_b}")
        object.__setattr__(self, "left", lt)
        object.__setattr__(self, "right", rt)

    @property
    def n_terms(self) -> int:
        return len(self.left)

    @property
    def shape(self) -> tuple[int, int]:
        return self.left[0].shape[0], self.right[0].shape[0]

    @property
    def symmetric(self) -> bool:
        """True when ``L(X).T == L(X.T)`` for every ``X``."""
        try:
            return self._symmetric
        except AttributeError:
            pass
        flag = self._probe_symmetry()
        object.__setattr__(self, "_symmetric", flag)
        return flag

    def _probe_symmetry(self) -> bool:
        n_a, n_b = self.shape
        if n_a != n_b:
            return False
        # L(u v^T)^T - L(v u^T) vanishes for random probes iff the operator
        # commutes with transposition (with probability one).
        rng = np.random.default_rng(12345)
        for _ in range(2):
            u = rng.standard_normal(n_a)
            v = rng.standard_normal(n_a)
            lf = np.column_stack([b @ v for b in self.right] + [-(a @ v) for a in self.left])
            rf = np.column_stack([a @ u for a in self.left] + [b @ u for b in self.right])
            _, rl = np.linalg.qr(lf)
            _, rr = np.linalg.qr(rf)
            scale = sum(np.linalg.norm(a @ u) * np.linalg.norm(b @ v)
                        for a, b in zip(self.left, self.right))
            if np.linalg.norm(rl @ rr.T) > 1e-10 * max(scale, 1e-300):
                return False
        return True

    def apply_dense(self, x: np.ndarray) -> np.ndarray:
        """Dense ``L(X)``; oracle and test use only."""
        out = np.zeros(self.shape)
        for a, b in zip(self.left, self.right):
            out += a @ (b @ x.T).T
        return out

    def kron_matrix(self) -> np.ndarray:
        """Dense ``sum_i B_i^T (x) A_i`` acting on column-major ``vec(X)``."""
        n_a, n_b = self.shape
        k = np.zeros((n_a * n_b, n_a * n_b))
        for a, b in zip(self.left, self.right):
            k += np.kron(b.T.toarray(), a.toarray())
        return k


@dataclass(frozen=True, eq=False)
class LowRankTriple:
    """``X = left @ core @ right.T`` with orthonormal ``left`` and ``right``.

    ``tail`` carries the Frobenius norm of whatever the producing truncation
    dropped; it is a diagnostic only.
    """

    left: np.ndarray
    core: np.ndarray
    right: np.ndarray
    tail: float = 0.0

    def __post_init__(self):
        left = np.asarray(self.left, dtype=float)
        right = np.asarray(self.right, dtype=float)
        core = np.asarray(self.core, dtype=float)
        if left.ndim != 2 or right.ndim != 2:
            raise ValueError("factors must be 2-D")
        core = core.reshape(left.shape[1], right.shape[1])
        if left.shape[1] != right.shape[1]:
            raise ValueError(f"factor widths differ: {left.shape[1]} vs {right.shape[1]}")
        for arr in (left, core, right):
            arr.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "core", core)

    @classmethod
    def zero(cls, n_a: int, n_b: int) -> "LowRankTriple":
        return cls(np.zeros((n_a, 0)), np.zeros((0, 0)), np.zeros((n_b, 0)))

    @classmethod
    def from_factors(cls, c1, c2, core=None) -> "LowRankTriple":
        """Orthonormalize ``C1 @ core @ C2.T`` (``core`` defaults to identity).

        The result keeps every nonzero singular value; no rank cap is applied.
        """
        c1 = np.asarray(c1, dtype=float)
        c2 = np.asarray(c2, dtype=float)
        c1 = c1.reshape(-1, 1) if c1.ndim == 1 else c1
        c2 = c2.reshape(-1, 1) if c2.ndim == 1 else c2
        if core is None:
            core = np.eye(c1.shape[1])
        ql, rl = np.linalg.qr(c1)
        qr_, rr = np.linalg.qr(c2)
        u, s, vt = np.linalg.svd(rl @ np.asarray(core, float) @ rr.T)
        keep = int(np.sum(s > s[0] * 1e-14)) if s.size and s[0] > 0 else 0
        return cls(ql @ u[:, :keep], np.diag(s[:keep]), qr_ @ vt[:keep].T)

    @property
    def rank(self) -> int:
        return self.core.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[0]

    def to_dense(self) -> np.ndarray:
        return self.left @ self.core @ self.right.T

    def transpose(self) -> "LowRankTriple":
        return LowRankTriple(self.right, self.core.T, self.left, self.tail)

    def scaled(self, c: float) -> "LowRankTriple":
        return LowRankTriple(self.left, c * self.core, self.right, abs(c) * self.tail)


@dataclass(frozen=True, eq=False)
class BlockFactorization:
    """Lazy ``[L_1, ..., L_m] @ core @ [R_1, ..., R_m].T``."""

    left_blocks: tuple
    core: np.ndarray
    right_blocks: tuple

    def __init__(self, left_blocks, core, right_blocks):
        lb = tuple(np.asarray(b, dtype=float) for b in left_blocks)
        rb = tuple(np.asarray(b, dtype=float) for b in right_blocks)
        wl = sum(b.shape[1] for b in lb)
        wr = sum(b.shape[1] for b in rb)
        core = np.asarray(core, dtype=float).reshape(wl, wr)
        if wl != wr:
            raise ValueError(f"left width {wl} != right width {wr}")
        object.__setattr__(self, "left_blocks", lb)
        object.__setattr__(self, "right_blocks", rb)
        object.__setattr__(self, "core", core)

    @property
    def width(self) -> int:
        return self.core.shape[0]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return np.hstack(self.left_blocks), np.hstack(self.right_blocks)

    def to_dense(self) -> np.ndarray:
        left, right = self.stacked()
        return left @ self.core @ right.T

    @classmethod
    def from_triples(cls, triples: Sequence[LowRankTriple], weights=None) -> "BlockFactorization":
        """Lazy ``sum_j w_j * T_j`` for triples ``T_j``."""
        if weights is None:
            weights = [1.0] * len(triples)
        core = _blkdiag([w * t.core for w, t in zip(weights, triples)])
        return cls([t.left for t in triples], core, [t.right for t in triples])


def _blkdiag(blocks) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


def _check_dims(op: MultitermOperator, x: LowRankTriple) -> None:
    n_a, n_b = op.shape
    for i, (a, b) in enumerate(zip(op.left, op.right)):
        if a.shape[1] != x.left.shape[0]:
            raise ValueError(f"term {i}: A has {a.shape[1]} columns, iterate has {x.left.shape[0]} rows")
        if b.shape[1] != x.right.shape[0]:
            raise ValueError(f"term {i}: B has {b.shape[1]} columns, iterate has {x.right.shape[0]} rows")


def apply_operator_factored(op: MultitermOperator, x: LowRankTriple) -> BlockFactorization:
    """``L(X)`` as ``[A_1 X^l, ..., A_l X^l] blkdiag(tau, ...) [B_1 X^r, ...]^T``."""
    _check_dims(op, x)
    left = [a @ x.left for a in op.left]
    right = [b @ x.right for b in op.right]
    return BlockFactorization(left, _blkdiag([x.core] * op.n_terms), right)


def inner_product_factored(x: LowRankTriple, y: LowRankTriple) -> float:
    """``trace(X^T Y)`` using only ``r_x x r_y`` intermediate products."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.rank == 0 or y.rank == 0:
        return 0.0
    gl = x.left.T @ y.left
    gr = y.right.T @ x.right
    return float(np.trace(x.core.T @ gl @ y.core @ gr))


def frob_norm_factored(x: LowRankTriple) -> float:
    return float(np.linalg.norm(x.core)) if x.rank else 0.0


# squared relative change below this is dominated by cancellation in the
# trace expansion; recompute from the stacked difference instead
_CANCEL_GUARD = 1e-8


def relative_change(x_prev: LowRankTriple, x_next: LowRankTriple) -> float:
    """``||X_next - X_prev||_F / ||X_next||_F`` from the factors."""
    nn = frob_norm_factored(x_next)
    if x_next.rank == 0 or nn == 0.0:
        raise ValueError("zero iterate in stopping test")
    np_ = frob_norm_factored(x_prev)
    sq = nn ** 2 + np_ ** 2 - 2.0 * inner_product_factored(x_next, x_prev)
    if sq < _CANCEL_GUARD * (nn ** 2 + np_ ** 2):
        d = _stacked_diff_norm(x_next, x_prev)
        # a difference at roundoff level of the inputs counts as zero
        sq = 0.0 if d <= 8 * np.finfo(float).eps * (nn + np_) else d ** 2
    return float(np.sqrt(max(sq, 0.0)) / nn)


def _stacked_diff_norm(x: LowRankTriple, y: LowRankTriple) -> float:
    if y.rank == 0:
        return frob_norm_factored(x)
    _, rl = np.linalg.qr(np.hstack([x.left, y.left]))
    _, rr = np.linalg.qr(np.hstack([x.right, y.right]))
    return float(np.linalg.norm(rl @ _blkdiag([x.core, -y.core]) @ rr.T))


def energy_functional(op: MultitermOperator, c: LowRankTriple, x: LowRankTriple) -> float:
    """``0.5 <X, L(X)> - <X, C>``, the quadratic minimized by CG-type methods."""
    if x.rank == 0:
        return 0.0
    quad = 0.0
    for a, b in zip(op.left, op.right):
        quad += np.trace(x.core.T @ (x.left.T @ (a @ x.left)) @ x.core @ (x.right.T @ (b @ x.right)))
    return float(0.5 * quad - inner_product_factored(x, c))


def orthonormality_error(x: LowRankTriple) -> float:
    """Largest of ``||F^T F - I||_F`` over both outer factors."""
    r = x.rank
    if r == 0:
        return 0.0
    eye = np.eye(r)
    return float(max(np.linalg.norm(x.left.T @ x.left - eye),
                     np.linalg.norm(x.right.T @ x.right - eye)))
