"""QR-SVD recompression and the residual compression strategies.

Three ways of getting a low-rank residual ``C - L(X)``:

``residual_full``
    stack ``[C^l, A_1 X^l, ..., A_l X^l]`` and its right counterpart
    explicitly, then recompress (width ``s_C + l*r``).
``residual_dynamic``
    add one term at a time to a running factored partial sum and cut back
    to ``maxrank_r`` after every addition (peak width ``maxrank_r + r``).
``residual_randomized``
    Gaussian range finder for the column and row spaces, with all products
    with the operator evaluated term by term (width ``maxrank_r``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lowrank import (
    BlockFactorization,
    LowRankTriple,
    MultitermOperator,
    _blkdiag,
    _check_dims,
)

__all__ = [
    "TruncationParams",
    "SketchPair",
    "truncate_qrsvd",
    "truncate_symmetric",
    "residual_blocks",
    "residual_blocks_symmetric",
    "residual_full",
    "residual_dynamic",
    "residual_randomized",
    "symmetrize",
    "true_relative_residual",
]

# singular values below this multiple of the pre-cancellation magnitude are
# treated as exact zeros
ROUNDOFF = 64 * np.finfo(float).eps


@dataclass(frozen=True)
class TruncationParams:
    tolrank: float = 1e-12
    maxrank: int = 20
    maxrank_r: int | None = None

    def __post_init__(self):
        if not 0.0 < self.tolrank < 1.0:
            raise ValueError(f"tolrank must lie in (0, 1), got {self.tolrank}")
        if self.maxrank < 1:
            raise ValueError(f"maxrank must be >= 1, got {self.maxrank}")
        if self.maxrank_r is None:
            object.__setattr__(self, "maxrank_r", 2 * self.maxrank)
        if self.maxrank_r < self.maxrank:
            raise ValueError(f"maxrank_r ({self.maxrank_r}) must be >= maxrank ({self.maxrank})")


@dataclass(frozen=True, eq=False)
class SketchPair:
    """Gaussian test matrices, drawn once per solve.

    ``gl`` multiplies the residual from the right (``n_B x k``), ``gr``
    multiplies its transpose (``n_A x k``).
    """

    gl: np.ndarray
    gr: np.ndarray
    seed: int

    @classmethod
    def generate(cls, n_a: int, n_b: int, width: int, seed: int) -> "SketchPair":
        rng = np.random.default_rng(seed)
        gl = rng.standard_normal((n_b, width))
        gr = rng.standard_normal((n_a, width))
        gl.setflags(write=False)
        gr.setflags(write=False)
        return cls(gl, gr, seed)

    @property
    def width(self) -> int:
        return self.gl.shape[1]


def _cut(s: np.ndarray, tolrank: float, cap: int, floor: float = 0.0) -> int:
    if s.size == 0 or s[0] <= floor or s[0] == 0.0:
        return 0
    keep = int(np.count_nonzero((s > tolrank * s[0]) & (s > floor)))
    return min(keep, cap)


def _qr(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.linalg.qr(m, mode="reduced")


def truncate_qrsvd(bf: BlockFactorization, params: TruncationParams,
                   rank_cap: int | None = None, scale: float | None = None) -> LowRankTriple:
    """Thin QR of both block stacks, SVD of the small core, rank cut.

    Keeps ``sigma_j`` with ``sigma_j / sigma_1 > tolrank``, at most
    ``rank_cap`` (default ``params.maxrank``) of them.  ``scale`` is the
    magnitude of the product before any cancellation; singular values below
    ``ROUNDOFF * scale`` are dropped as numerical zeros.  The Frobenius norm
    of everything dropped is stored in ``tail``.
    """
    cap = params.maxrank if rank_cap is None else rank_cap
    left, right = bf.stacked() if bf.width else (None, None)
    if bf.width == 0:
        n_a = bf.left_blocks[0].shape[0] if bf.left_blocks else 0
        n_b = bf.right_blocks[0].shape[0] if bf.right_blocks else 0
        return LowRankTriple.zero(n_a, n_b)
    if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right)) and np.all(np.isfinite(bf.core))):
        raise FloatingPointError("non-finite values in factorization to truncate")
    ql, rl = _qr(left)
    qr_, rr = _qr(right)
    u, s, vt = np.linalg.svd(rl @ bf.core @ rr.T)
    floor = ROUNDOFF * scale if scale is not None else 0.0
    j = _cut(s, params.tolrank, cap, floor)
    tail = float(np.sqrt(np.sum(s[j:] ** 2)))
    return LowRankTriple(ql @ u[:, :j], np.diag(s[:j]), qr_ @ vt[:j].T, tail)


def truncate_symmetric(bf: BlockFactorization, params: TruncationParams,
                       rank_cap: int | None = None, scale: float | None = None) -> LowRankTriple:
    """Symmetric counterpart of :func:`truncate_qrsvd`.

    Only the left blocks are read; the core must be symmetric.  The result
    has ``left is right`` and a diagonal (possibly indefinite) core ordered
    by decreasing magnitude.
    """
    cap = params.maxrank if rank_cap is None else rank_cap
    n = bf.left_blocks[0].shape[0] if bf.left_blocks else 0
    if bf.width == 0:
        return LowRankTriple.zero(n, n)
    left = np.hstack(bf.left_blocks)
    if not (np.all(np.isfinite(left)) and np.all(np.isfinite(bf.core))):
        raise FloatingPointError("non-finite values in factorization to truncate")
    q, r = _qr(left)
    small = r @ bf.core @ r.T
    lam, u = np.linalg.eigh(0.5 * (small + small.T))
    order = np.argsort(-np.abs(lam))
    lam, u = lam[order], u[:, order]
    mag = np.abs(lam)
    floor = ROUNDOFF * scale if scale is not None else 0.0
    j = _cut(mag, params.tolrank, cap, floor)
    tail = float(np.sqrt(np.sum(mag[j:] ** 2)))
    basis = q @ u[:, :j]
    return LowRankTriple(basis, np.diag(lam[:j]), basis, tail)


def symmetrize(x: LowRankTriple, params: TruncationParams, rank_cap: int | None = None) -> LowRankTriple:
    """Closest symmetric triple ``(X + X^T)/2`` in single-factor form."""
    if x.rank == 0:
        return x
    half = 0.5 * x.core
    core = np.block([[np.zeros_like(half), half], [half.T, np.zeros_like(half)]])
    bf = BlockFactorization([x.left, x.right], core, [x.left, x.right])
    out = truncate_symmetric(bf, params, rank_cap=rank_cap)
    return LowRankTriple(out.left, out.core, out.right, out.tail + x.tail)


def residual_blocks(op: MultitermOperator, c: LowRankTriple, x: LowRankTriple) -> BlockFactorization:
    """Lazy ``C - L(X)`` with core ``blkdiag(rho_C, -tau, ..., -tau)``."""
    _check_dims(op, x)
    if c.shape != op.shape:
        raise ValueError(f"right-hand side is {c.shape}, operator acts on {op.shape}")
    left = [c.left] + [a @ x.left for a in op.left]
    right = [c.right] + [b @ x.right for b in op.right]
    core = _blkdiag([c.core] + [-x.core] * op.n_terms)
    return BlockFactorization(left, core, right)


def _same_matrix(a, b) -> bool:
    if a is b:
        return True
    return a.shape == b.shape and (a != b).nnz == 0


def residual_blocks_symmetric(op: MultitermOperator, c: LowRankTriple,
                              x: LowRankTriple) -> BlockFactorization:
    """Single-stack form of ``C - L(X)`` for symmetric ``L``, ``C`` and ``X``.

    Uses ``L(X) = (L(X) + L(X)^T) / 2`` so that the left and right stacks
    coincide: ``[C^l, M_1 X, ..., M_m X]`` over the distinct matrices ``M_j``
    appearing in the terms.
    """
    _check_dims(op, x)
    mats: list = []

    def slot(m):
        for k, seen in enumerate(mats):
            if _same_matrix(seen, m):
                return k
        mats.append(m)
        return len(mats) - 1

    pairs = [(slot(a), slot(b)) for a, b in zip(op.left, op.right)]
    r, s_c = x.rank, c.rank
    width = s_c + len(mats) * r
    core = np.zeros((width, width))
    core[:s_c, :s_c] = 0.5 * (c.core + c.core.T)
    for ia, ib in pairs:
        sa = slice(s_c + ia * r, s_c + (ia + 1) * r)
        sb = slice(s_c + ib * r, s_c + (ib + 1) * r)
        core[sa, sb] -= 0.5 * x.core
        core[sb, sa] -= 0.5 * x.core.T
    blocks = [c.left] + [m @ x.left for m in mats] if r else [c.left]
    if not r:
        core = core[:s_c, :s_c]
    return BlockFactorization(blocks, core, blocks)


def _residual_scale(op: MultitermOperator, c: LowRankTriple, x: LowRankTriple) -> float:
    scale = float(np.linalg.norm(c.core))
    if x.rank:
        for a, b in zip(op.left, op.right):
            scale += np.linalg.norm(a @ (x.left @ x.core)) * np.linalg.norm(b @ x.right, 2)
    return scale


def residual_full(op: MultitermOperator, c: LowRankTriple, x: LowRankTriple,
                  params: TruncationParams, symmetric: bool = False) -> LowRankTriple:
    """``C - L(X)`` from the explicitly stacked factors, capped at ``maxrank_r``."""
    scale = _residual_scale(op, c, x)
    if symmetric:
        bf = residual_blocks_symmetric(op, c, x)
        return truncate_symmetric(bf, params, rank_cap=params.maxrank_r, scale=scale)
    bf = residual_blocks(op, c, x)
    return truncate_qrsvd(bf, params, rank_cap=params.maxrank_r, scale=scale)


def residual_dynamic(op: MultitermOperator, c: LowRankTriple, x: LowRankTriple,
                     params: TruncationParams) -> LowRankTriple:
    """``C - L(X)`` by adding one term at a time and recompressing after each.

    The running partial sum is kept as ``Q^l S (Q^r)^T``.  Appending the next
    term ``(A_j X^l tau)(-B_j X^r)^T`` takes one thin QR per side of
    ``[Q, block]`` and an SVD of the small core ``r^l blkdiag(S, I) (r^r)^T``,
    then cuts back to ``maxrank_r``.  At most ``maxrank_r + rank(X)`` columns
    are held per side.
    """
    _check_dims(op, x)
    n_a, n_b = op.shape
    ql = np.zeros((n_a, 0))
    qr_ = np.zeros((n_b, 0))
    core = np.zeros((0, 0))
    blocks = [(c.left @ c.core, c.right)]
    if x.rank:
        xt = x.left @ x.core
        blocks += [(a @ xt, -(b @ x.right)) for a, b in zip(op.left, op.right)]
    scale = 0.0
    tail_sq = 0.0
    for bl, br in blocks:
        if bl.shape[1] == 0:
            continue
        scale += float(np.linalg.norm(bl) * np.linalg.norm(br, 2))
        q1l, r1l = _qr(np.hstack([ql, bl]))
        q1r, r1r = _qr(np.hstack([qr_, br]))
        grown = _blkdiag([core, np.eye(bl.shape[1])])
        u, s, vt = np.linalg.svd(r1l @ grown @ r1r.T)
        j = _cut(s, params.tolrank, params.maxrank_r, ROUNDOFF * scale)
        tail_sq += float(np.sum(s[j:] ** 2))
        ql, qr_, core = q1l @ u[:, :j], q1r @ vt[:j].T, np.diag(s[:j])
    if core.shape[0] == 0:
        return LowRankTriple.zero(n_a, n_b)
    return LowRankTriple(ql, core, qr_, float(np.sqrt(tail_sq)))


def _sketch_residual(op, c, x, g):
    """``(C - L(X)) @ g`` evaluated innermost-first, term by term."""
    y = c.left @ (c.core @ (c.right.T @ g))
    if x.rank:
        for a, b in zip(op.left, op.right):
            y -= a @ (x.left @ (x.core @ (x.right.T @ (b @ g))))
    return y


def _sketch_residual_t(op, c, x, g):
    """``(C - L(X)).T @ g``, mirror of :func:`_sketch_residual`."""
    y = c.right @ (c.core.T @ (c.left.T @ g))
    if x.rank:
        for a, b in zip(op.left, op.right):
            y -= b @ (x.right @ (x.core.T @ (x.left.T @ (a @ g))))
    return y


def residual_randomized(op: MultitermOperator, c: LowRankTriple, x: LowRankTriple,
                        sketch: SketchPair, params: TruncationParams,
                        symmetric: bool = False) -> LowRankTriple:
    """``C - L(X)`` via Gaussian range finding, never stacking ``A_* . X^l``.

    With ``symmetric`` the column-space basis doubles as the row-space basis
    and the core is split by an eigendecomposition.
    """
    _check_dims(op, x)
    n_a, n_b = op.shape
    if sketch.gl.shape[0] != n_b or sketch.gr.shape[0] != n_a:
        raise ValueError("sketch dimensions do not match the operator")
    q, _ = _qr(_sketch_residual(op, c, x, sketch.gl))
    if symmetric:
        w = q
    else:
        w, _ = _qr(_sketch_residual_t(op, c, x, sketch.gr))
    qc = q.T @ c.left
    core = qc @ c.core @ (c.right.T @ w)
    scale = float(np.linalg.norm(c.core))
    if x.rank:
        for a, b in zip(op.left, op.right):
            term = ((a @ q).T @ x.left) @ x.core @ (x.right.T @ (b @ w))
            core -= term
            scale += float(np.linalg.norm(term))
    floor = ROUNDOFF * scale
    if symmetric:
        lam, u = np.linalg.eigh(0.5 * (core + core.T))
        order = np.argsort(-np.abs(lam))
        lam, u = lam[order], u[:, order]
        j = _cut(np.abs(lam), params.tolrank, params.maxrank_r, floor)
        basis = q @ u[:, :j]
        return LowRankTriple(basis, np.diag(lam[:j]), basis, float(np.linalg.norm(lam[j:])))
    u, s, vt = np.linalg.svd(core)
    j = _cut(s, params.tolrank, params.maxrank_r, floor)
    tail = float(np.sqrt(np.sum(s[j:] ** 2)))
    return LowRankTriple(q @ u[:, :j], np.diag(s[:j]), w @ vt[:j].T, tail)


def true_relative_residual(op: MultitermOperator, c: LowRankTriple, x: LowRankTriple,
                           max_entries: float = 5e7, seed: int = 0) -> tuple[float, bool]:
    """``||C - L(X)||_F / ||C||_F`` and whether the value is a sketch estimate.

    Exact (untruncated QR of the stacked residual factors) whenever the stacks
    fit in ``max_entries`` doubles; otherwise a 32-column Gaussian estimate.
    """
    n_a, n_b = op.shape
    cn = float(np.linalg.norm(c.core))
    if cn == 0.0:
        raise ValueError("right-hand side is zero")
    width = c.rank + op.n_terms * x.rank
    if width * (n_a + n_b) <= max_entries:
        bf = residual_blocks(op, c, x)
        left, right = bf.stacked()
        _, rl = _qr(left)
        _, rr = _qr(right)
        return float(np.linalg.norm(rl @ bf.core @ rr.T)) / cn, False
    g = np.random.default_rng(seed).standard_normal((n_b, 32))
    est = np.linalg.norm(_sketch_residual(op, c, x, g)) / np.sqrt(32)
    return float(est) / cn, True
