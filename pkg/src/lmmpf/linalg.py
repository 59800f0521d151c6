"""Sparse and small-dense kernels.

Periodic first-difference operators, Kronecker products, block-diagonal
assembly and per-block solves, and weighted ensemble moments.

The block solver is written so that the result for one block never depends
on how many other blocks are solved alongside it: the dense path uses an
elementwise, batched LU with partial pivoting (no BLAS reductions), and
larger blocks are factored one at a time (LAPACK for moderate sizes,
SuperLU beyond that).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateCovarianceError,
    InvalidDimensionError,
    InvalidWeightsError,
    SingularBlockError,
)

# Blocks larger than this are stored as a list and factored one by one.
SPARSE_BLOCK_THRESHOLD = 64
# Listed blocks up to this size are kept dense and factored by LAPACK;
# larger ones are kept sparse and factored by SuperLU.
DENSE_LU_MAX = 512
# Blocks up to this size on a single-block solve use the scalar LU path.
_SCALAR_LU_MAX = 8

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed sparse row matrix with sorted, duplicate-free rows."""

    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _scipy: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ro = np.asarray(self.row_offsets, dtype=np.int64)
        ci = np.asarray(self.col_indices, dtype=np.int64)
        va = np.asarray(self.values, dtype=float)
        if ro.shape != (self.nrows + 1,) or ro[0] != 0 or ro[-1] != va.size:
            raise InvalidDimensionError("row_offsets inconsistent with values")
        if np.any(np.diff(ro) < 0):
            raise InvalidDimensionError("row_offsets must be nondecreasing")
        if ci.size != va.size:
            raise InvalidDimensionError("col_indices and values differ in length")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.ncols:
                raise InvalidDimensionError("column index out of range")
            # strictly increasing within each row
            step = np.diff(ci)
            row_start = np.zeros(ci.size, dtype=bool)
            row_start[ro[:-1][np.diff(ro) > 0]] = True
            if np.any(step[~row_start[1:]] <= 0):
                raise InvalidDimensionError("columns must be strictly increasing per row")
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "values", va)

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return int(self.values.size)

    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a) -> "CsrMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=float)))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_scipy(self) -> sp.csr_matrix:
        if self._scipy is None:
            m = sp.csr_matrix(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape
            )
            m.has_sorted_indices = True
            object.__setattr__(self, "_scipy", m)
        return self._scipy

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.to_scipy().T.tocsr())

    @property
    def T(self):
        return self.transpose()

    def matvec(self, x) -> np.ndarray:
        return spmv(self, x)

    def __matmul__(self, other):
        if isinstance(other, CsrMatrix):
            return CsrMatrix.from_scipy(self.to_scipy() @ other.to_scipy())
        return spmv(self, other)

    def __add__(self, other: "CsrMatrix") -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.to_scipy() + other.to_scipy())

    def __sub__(self, other: "CsrMatrix") -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.to_scipy() - other.to_scipy())

    def __mul__(self, scalar: float) -> "CsrMatrix":
        return CsrMatrix(
            self.nrows, self.ncols, self.row_offsets, self.col_indices,
            self.values * float(scalar),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def periodic_diff_matrix(n: int, scale: float = 1.0) -> CsrMatrix:
    """Circulant first difference: 1 on the diagonal, -1 below it, -1 top-right.

    ``scale`` multiplies every entry (1 reproduces the unscaled stencil).
    """
    if n < 2:
        raise InvalidDimensionError(f"periodic difference needs n >= 2, got {n}")
    rows = []
    for i in range(n):
        left = (i - 1) % n
        rows.append(sorted([(i, scale), (left, -scale)]))
    offsets = np.arange(0, 2 * n + 1, 2)
    cols = np.array([c for r in rows for c, _ in r])
    vals = np.array([v for r in rows for _, v in r])
    return CsrMatrix(n, n, offsets, cols, vals)


def kron(A: CsrMatrix, B: CsrMatrix) -> CsrMatrix:
    """Kronecker product, assembled row by row in sorted column order."""
    mb, nb = B.nrows, B.ncols
    a_counts = np.diff(A.row_offsets)
    b_counts = np.diff(B.row_offsets)
    counts = np.outer(a_counts, b_counts).ravel()
    offsets = np.concatenate([[0], np.cumsum(counts)])
    nnz = int(offsets[-1])
    try:
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=float)
    except MemoryError as exc:  # pragma: no cover
        raise MemoryError(f"kron result with {nnz} nonzeros does not fit") from exc
    pos = 0
    for i in range(A.nrows):
        sa = slice(A.row_offsets[i], A.row_offsets[i + 1])
        acol = A.col_indices[sa] * nb
        aval = A.values[sa]
        for j in range(mb):
            sb = slice(B.row_offsets[j], B.row_offsets[j + 1])
            k = acol.size * (sb.stop - sb.start)
            cols[pos:pos + k] = (acol[:, None] + B.col_indices[sb][None, :]).ravel()
            vals[pos:pos + k] = (aval[:, None] * B.values[sb][None, :]).ravel()
            pos += k
    return CsrMatrix(A.nrows * mb, A.ncols * nb, offsets, cols, vals)


def spmv(A: CsrMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (A.ncols,):
        raise InvalidDimensionError(f"spmv: expected vector of length {A.ncols}, got {x.shape}")
    rows = np.repeat(np.arange(A.nrows), np.diff(A.row_offsets))
    return np.bincount(rows, weights=A.values * x[A.col_indices], minlength=A.nrows)


def block_diag_csr(mats: Sequence[sp.csr_matrix]) -> sp.csr_matrix:
    """Stack square CSR matrices on the diagonal, keeping each row's entry order."""
    d = mats[0].shape[0]
    indptr = [np.zeros(1, dtype=np.int64)]
    indices, data = [], []
    base = 0
    for k, m in enumerate(mats):
        indptr.append(m.indptr[1:].astype(np.int64) + base)
        indices.append(m.indices.astype(np.int64) + k * d)
        data.append(m.data)
        base += m.nnz
    n = d * len(mats)
    out = sp.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), np.concatenate(indptr)),
        shape=(n, n),
    )
    out.has_sorted_indices = True
    return out


@dataclass
class BlockDiag:
    """Logical block-diagonal matrix made of equally sized square blocks.

    ``blocks`` is a ``(nblocks, d, d)`` array on the batched dense path, or a
    list of per-block matrices when ``d`` exceeds
    :data:`SPARSE_BLOCK_THRESHOLD` (dense arrays up to :data:`DENSE_LU_MAX`,
    scipy sparse beyond).  Per-block factorizations are computed lazily and
    cached on the instance.
    """

    block_dim: int
    nblocks: int
    blocks: object
    factors: list | None = field(default=None, repr=False)

    @property
    def sparse(self) -> bool:
        return not isinstance(self.blocks, np.ndarray)

    @property
    def shape(self):
        n = self.block_dim * self.nblocks
        return (n, n)

    def block(self, k: int) -> np.ndarray:
        b = self.blocks[k]
        return b.toarray() if sp.issparse(b) else np.asarray(b)

    def to_dense(self) -> np.ndarray:
        d = self.block_dim
        out = np.zeros(self.shape)
        for k in range(self.nblocks):
            out[k * d:(k + 1) * d, k * d:(k + 1) * d] = self.block(k)
        return out

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.nblocks, self.block_dim)
        if self.sparse:
            return np.concatenate([self.blocks[k] @ x[k] for k in range(self.nblocks)])
        return np.einsum("kij,kj->ki", self.blocks, x).ravel()


def block_diag_assemble(blocks) -> BlockDiag:
    """Wrap square blocks of identical size as a block-diagonal matrix."""
    if isinstance(blocks, np.ndarray) and blocks.ndim == 3:
        if blocks.shape[0] == 0:
            raise InvalidDimensionError("block_diag_assemble needs at least one block")
        if blocks.shape[1] != blocks.shape[2]:
            raise InvalidDimensionError("blocks must be square")
        d = blocks.shape[1]
        if d > SPARSE_BLOCK_THRESHOLD:
            return BlockDiag(d, blocks.shape[0], [_listed_block(b) for b in blocks])
        return BlockDiag(d, blocks.shape[0], np.asarray(blocks, dtype=float))
    blocks = list(blocks)
    if not blocks:
        raise InvalidDimensionError("block_diag_assemble needs at least one block")
    shapes = {b.shape for b in blocks}
    if len(shapes) != 1:
        raise InvalidDimensionError(f"heterogeneous block shapes: {sorted(shapes)}")
    (shape,) = shapes
    if len(shape) != 2 or shape[0] != shape[1]:
        raise InvalidDimensionError("blocks must be square")
    d = shape[0]
    if d > SPARSE_BLOCK_THRESHOLD:
        return BlockDiag(d, len(blocks), [_listed_block(_as_matrix(b)) for b in blocks])
    dense = np.stack([_dense(b) for b in blocks])
    return BlockDiag(d, len(blocks), dense)


def _listed_block(b):
    """Storage for one block on the per-block path."""
    if b.shape[0] <= DENSE_LU_MAX:
        return b.toarray() if sp.issparse(b) else np.array(b, dtype=float)
    return sp.csc_matrix(b)


class _DenseLU:
    def __init__(self, lu_piv):
        self.lu_piv = lu_piv

    def solve(self, b):
        return sla.lu_solve(self.lu_piv, b, check_finite=False)


def factor_block(blk):
    """LU factors of one listed block, or ``None`` when it is singular."""
    if sp.issparse(blk):
        try:
            return spla.splu(sp.csc_matrix(blk))
        except RuntimeError:
            return None
    a = np.asarray(blk, dtype=float)
    if not np.isfinite(a).all():
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a, check_finite=False)
    diag = np.abs(np.diag(lu))
    if not np.all(diag > _EPS * a.shape[0] * max(1.0, float(np.abs(a).max()))):
        return None
    return _DenseLU((lu, piv))


def _as_matrix(b):
    if isinstance(b, CsrMatrix):
        return b.to_scipy()
    return b


def _dense(b) -> np.ndarray:
    if isinstance(b, CsrMatrix):
        return b.to_dense()
    if sp.issparse(b):
        return b.toarray()
    return np.asarray(b, dtype=float)


def block_diag_solve(A: BlockDiag, b) -> np.ndarray:
    """Solve ``A x = b`` block by block.

    ``b`` may be flat (length ``nblocks * block_dim``) or shaped
    ``(nblocks, block_dim)``; the result has the same shape.  Raises
    :class:`SingularBlockError` listing the failing blocks; its ``solution``
    carries the solution of all healthy blocks.
    """
    b = np.asarray(b, dtype=float)
    flat = b.ndim == 1
    if b.size != A.nblocks * A.block_dim:
        raise InvalidDimensionError(
            f"rhs length {b.size} does not match {A.nblocks} blocks of size {A.block_dim}"
        )
    rhs = b.reshape(A.nblocks, A.block_dim)
    if A.sparse:
        x, bad = _sparse_block_solve(A, rhs)
    elif A.nblocks == 1 and A.block_dim <= _SCALAR_LU_MAX:
        x1, bad1 = _scalar_lu_solve(A.blocks[0], rhs[0])
        x = x1 if flat else x1[None, :]
        if bad1:
            raise SingularBlockError([0], x)
        return x
    else:
        lu, perm, bad = lu_factor_batched(A.blocks)
        x = lu_solve_batched(lu, perm, rhs)
        x[bad] = np.nan
    if flat:
        x = x.ravel()
    if np.any(bad):
        raise SingularBlockError(np.flatnonzero(bad), x)
    return x


_EPS = float(np.finfo(float).eps)


def _pivot_tolerance(blocks: np.ndarray) -> np.ndarray:
    # row sums accumulated column by column so the scalar path can mirror them
    d = blocks.shape[-1]
    a = np.abs(blocks)
    rows = a[..., 0]
    for j in range(1, d):
        rows = rows + a[..., j]
    return (d * _EPS) * rows.max(axis=-1)


def _pivot_tolerance_scalar(a) -> float:
    d = len(a)
    best = None
    for row in a:
        s = abs(row[0])
        for j in range(1, d):
            s = s + abs(row[j])
        if best is None or s > best:
            best = s
    return (d * _EPS) * best


def lu_factor_batched(blocks: np.ndarray):
    """LU with partial pivoting applied to a stack of dense blocks at once.

    Only elementwise operations are used, so each block's factors are
    identical to factoring it alone.  Returns ``(lu, perm, singular)``.
    """
    a = np.array(blocks, dtype=float)
    nb, d, _ = a.shape
    tol = _pivot_tolerance(a)
    perm = np.tile(np.arange(d), (nb, 1))
    singular = ~np.isfinite(a).all(axis=(1, 2))
    rows = np.arange(nb)
    for k in range(d):
        p = np.argmax(np.abs(a[:, k:, k]), axis=1) + k
        swap = p != k
        if np.any(swap):
            r = rows[swap]
            pk = p[swap]
            tmp = a[r, k, :].copy()
            a[r, k, :] = a[r, pk, :]
            a[r, pk, :] = tmp
            tmp = perm[r, k].copy()
            perm[r, k] = perm[r, pk]
            perm[r, pk] = tmp
        piv = a[:, k, k]
        bad = ~(np.abs(piv) > tol)
        singular |= bad
        if k + 1 < d:
            safe = np.where(bad, 1.0, piv)
            lcol = a[:, k + 1:, k] / safe[:, None]
            a[:, k + 1:, k] = lcol
            a[:, k + 1:, k + 1:] = a[:, k + 1:, k + 1:] - lcol[:, :, None] * a[:, k, None, k + 1:]
    return a, perm, singular


def lu_solve_batched(lu: np.ndarray, perm: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    nb, d, _ = lu.shape
    y = np.take_along_axis(np.asarray(rhs, dtype=float), perm, axis=1).copy()
    for j in range(d - 1):
        y[:, j + 1:] = y[:, j + 1:] - lu[:, j + 1:, j] * y[:, j, None]
    x = y
    with np.errstate(divide="ignore", invalid="ignore"):
        for j in range(d - 1, -1, -1):
            x[:, j] = x[:, j] / lu[:, j, j]
            if j:
                x[:, :j] = x[:, :j] - lu[:, :j, j] * x[:, j, None]
    return x


def _scalar_lu_solve(block: np.ndarray, rhs: np.ndarray):
    """Single small block with plain floats; mirrors the batched operation order."""
    d = block.shape[0]
    a = block.tolist()
    if not all(math.isfinite(v) for row in a for v in row):
        return np.full(d, np.nan), True
    tol = _pivot_tolerance_scalar(a)
    perm = list(range(d))
    singular = False
    for k in range(d):
        p, best = k, abs(a[k][k])
        for i in range(k + 1, d):
            v = abs(a[i][k])
            if v > best:
                p, best = i, v
        if p != k:
            a[k], a[p] = a[p], a[k]
            perm[k], perm[p] = perm[p], perm[k]
        piv = a[k][k]
        bad = not (abs(piv) > tol)
        singular = singular or bad
        safe = 1.0 if bad else piv
        rk = a[k]
        for i in range(k + 1, d):
            ri = a[i]
            lik = ri[k] / safe
            ri[k] = lik
            for c in range(k + 1, d):
                ri[c] = ri[c] - lik * rk[c]
    r = rhs.tolist()
    y = [r[perm[i]] for i in range(d)]
    for j in range(d - 1):
        yj = y[j]
        for i in range(j + 1, d):
            y[i] = y[i] - a[i][j] * yj
    if singular:
        return np.full(d, np.nan), True
    for j in range(d - 1, -1, -1):
        y[j] = y[j] / a[j][j]
        yj = y[j]
        for i in range(j):
            y[i] = y[i] - a[i][j] * yj
    return np.array(y), False


def _sparse_block_solve(A: BlockDiag, rhs: np.ndarray):
    if A.factors is None:
        A.factors = [factor_block(blk) for blk in A.blocks]
    x = np.empty_like(rhs)
    bad = np.zeros(A.nblocks, dtype=bool)
    for k, f in enumerate(A.factors):
        if f is None:
            bad[k] = True
            x[k] = np.nan
            continue
        x[k] = f.solve(rhs[k])
        if not np.all(np.isfinite(x[k])):
            bad[k] = True
    return x, bad


def weighted_mean_cov(params, weights, tol: float = 1e-12):
    """Weighted mean and (unnormalized, no Bessel correction) covariance."""
    params = np.asarray(params, dtype=float)
    w = np.asarray(weights, dtype=float)
    if params.ndim != 2 or w.shape != (params.shape[0],):
        raise InvalidDimensionError("params must be N x p and weights length N")
    if np.any(w < 0) or not np.isfinite(w).all() or abs(w.sum() - 1.0) > tol:
        raise InvalidWeightsError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
    # shifting by the heaviest particle keeps degenerate ensembles exact
    ref = params[int(np.argmax(w))]
    mean = ref + w @ (params - ref)
    diff = params - mean
    cov = (diff * w[:, None]).T @ diff
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def chol_psd(C, sym_tol: float = 1e-12):
    """Cholesky factor of ``C + eps*I`` with the smallest jitter that works.

    Returns ``(L, eps)`` where ``eps`` is the absolute jitter added to the
    diagonal, taken from :data:`JITTER_LADDER` times ``trace(C)/p``.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise InvalidDimensionError("chol_psd needs a square matrix")
    p = C.shape[0]
    scale = max(1.0, float(np.abs(C).max(initial=0.0)))
    if np.abs(C - C.T).max(initial=0.0) > sym_tol * scale:
        raise DegenerateCovarianceError("covariance is not symmetric")
    if not np.isfinite(C).all():
        raise DegenerateCovarianceError("covariance has non-finite entries")
    unit = np.trace(C) / p
    if unit == 0.0 and not C.any():
        return np.zeros_like(C), 0.0
    eye = np.eye(p)
    for rung in JITTER_LADDER:
        eps = rung * unit
        try:
            return np.linalg.cholesky(C + eps * eye), eps
        except np.linalg.LinAlgError:
            continue
    raise DegenerateCovarianceError(
        f"covariance not positive definite even with jitter {JITTER_LADDER[-1]}*trace/p"
    )
