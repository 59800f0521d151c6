"""ODE systems used by the filter.

Every model evaluates its right-hand side and Jacobian on arrays with an
arbitrary leading batch shape (``x[..., d]``, ``theta[..., p]``), using only
elementwise operations, so a particle's values do not depend on whether it is
evaluated alone or inside a stacked batch.

``model.bind(theta)`` fixes the parameters for one interval and returns a
system object exposing ``rhs``, ``iteration_matrix`` and ``explicit`` rows;
the integrators only talk to bound systems.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InvalidDimensionError, ParticleInvalidError
from .linalg import (
    BlockDiag,
    CsrMatrix,
    DENSE_LU_MAX,
    SPARSE_BLOCK_THRESHOLD,
    block_diag_assemble,
    block_diag_csr,
    factor_block,
    kron,
    periodic_diff_matrix,
)

# Gaussian plume table for the advection-diffusion initial condition.
PLUME_STD = (0.04, 0.08, 0.07, 0.10, 0.05, 0.06)
PLUME_XC = (0.20, 0.30, 0.40, 0.50, 0.50, 0.70)
PLUME_YC = (0.80, 0.40, 0.40, 0.50, 0.60, 0.50)


class OdeModel:
    """Base class for models consumed by the integrators.

    Subclasses set ``dim``, ``param_dim``, ``param_names``, ``log_params``
    (which parameters are positive and estimated in log space) and implement
    :meth:`rhs` and :meth:`jacobian`.  ``linear`` marks systems whose
    right-hand side is ``L(theta) x``.
    """

    dim: int
    param_dim: int = 0
    param_names: tuple = ()
    log_params: tuple = ()
    linear: bool = False

    def rhs(self, t, x, theta):
        raise NotImplementedError

    def jacobian(self, t, x, theta):
        raise NotImplementedError

    def bind(self, theta) -> "BoundSystem":
        return BoundSystem(self, theta)

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        mask = np.asarray(self.log_params, dtype=bool) if self.log_params else np.zeros(self.param_dim, bool)
        out = theta.copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            out[..., mask] = np.log(theta[..., mask])
        return out

    def to_natural(self, phi):
        phi = np.asarray(phi, dtype=float)
        mask = np.asarray(self.log_params, dtype=bool) if self.log_params else np.zeros(self.param_dim, bool)
        out = phi.copy()
        out[..., mask] = np.exp(phi[..., mask])
        return out


class BoundSystem:
    """A model with parameters fixed for one propagation interval.

    ``theta`` is either a single parameter vector (then states are 1-D) or an
    ``(N, p)`` matrix (then states are ``(k, d)`` rows selected by ``idx``).
    """

    def __init__(self, model: OdeModel, theta):
        self.model = model
        self.theta = np.asarray(theta, dtype=float)
        self.batched = self.theta.ndim == 2
        self.jacobian_assemblies = 0

    def _theta(self, idx):
        if not self.batched or idx is None:
            return self.theta
        return self.theta[idx]

    def rhs(self, t, x, idx=None):
        return self.model.rhs(t, x, self._theta(idx))

    def iteration_matrix(self, t, x, hb0, idx=None) -> BlockDiag:
        """``I - hb0 * J`` for every selected particle, as a block-diagonal matrix."""
        self.jacobian_assemblies += 1
        J = np.asarray(self.model.jacobian(t, x, self._theta(idx)))
        d = self.model.dim
        M = np.eye(d) - hb0 * J
        if M.ndim == 2:
            M = M[None]
        if d > SPARSE_BLOCK_THRESHOLD:
            return block_diag_assemble(M)
        return BlockDiag(d, M.shape[0], M)


# -- metabolic chain -------------------------------------------------------


def input_phi(t, A0, A, t0, tau):
    """Input flux ``A0 + A (t - t0)_+ exp(-(t - t0)/tau)``."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    s = t - t0
    if s <= 0:
        return float(A0)
    return float(A0 + A * s * math.exp(-s / tau))


@dataclass(frozen=True)
class MetabolicConstants:
    """Known constants of the three-compartment chain.

    The defaults are placeholders chosen for this package, not reference values.
    """

    lam: float = 1.0
    c0: float = 1.0
    A0: float = 1.0
    A: float = 5.0
    t0: float = 2.0
    tau: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


def _mm_terms(x, theta):
    x1, x2 = x[..., 0], x[..., 1]
    V1, k1, V2, k2 = theta[..., 0], theta[..., 1], theta[..., 2], theta[..., 3]
    den1 = x1 + k1
    den2 = x2 + k2
    bad = ~((den1 > 0) & (den2 > 0))
    return V1, k1, V2, k2, den1, den2, bad


def _scalar_state(x, theta):
    x1, x2, x3 = x.tolist()
    V1, k1, V2, k2 = theta.tolist()
    return x1, x2, x3, V1, k1, V2, k2, x1 + k1, x2 + k2


# The scalar branches below repeat the array formulas operation for operation,
# which keeps single-particle results bitwise equal to batched ones.


def metabolic_rhs(t, x, theta, consts: MetabolicConstants = MetabolicConstants(), *, strict=True):
    """Right-hand side of the chain; ``strict=False`` returns NaN rows instead of raising."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.ndim == 1 and theta.ndim == 1:
        x1, x2, x3, V1, k1, V2, k2, den1, den2 = _scalar_state(x, theta)
        if not (den1 > 0 and den2 > 0):
            if strict:
                raise ParticleInvalidError("x1 + k1 or x2 + k2 is not positive", particles=True)
            return np.full(3, np.nan)
        flux1 = V1 * x1 / den1
        flux2 = V2 * x2 / den2
        phi = input_phi(t, consts.A0, consts.A, consts.t0, consts.tau)
        return np.array([phi - flux1, flux1 - flux2, flux2 - consts.lam * (x3 - consts.c0)])
    V1, k1, V2, k2, den1, den2, bad = _mm_terms(x, theta)
    if strict and np.any(bad):
        raise ParticleInvalidError("x1 + k1 or x2 + k2 is not positive", particles=bad)
    with np.errstate(divide="ignore", invalid="ignore"):
        flux1 = V1 * x[..., 0] / den1
        flux2 = V2 * x[..., 1] / den2
    phi = input_phi(t, consts.A0, consts.A, consts.t0, consts.tau)
    out = np.empty(np.broadcast_shapes(x.shape, theta.shape[:-1] + (3,)))
    out[..., 0] = phi - flux1
    out[..., 1] = flux1 - flux2
    out[..., 2] = flux2 - consts.lam * (x[..., 2] - consts.c0)
    if np.any(bad):
        out[bad] = np.nan
    return out


def metabolic_jacobian(x, theta, consts: MetabolicConstants = MetabolicConstants(), *, strict=True):
    """Lower-bidiagonal state Jacobian of the chain."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.ndim == 1 and theta.ndim == 1:
        x1, x2, x3, V1, k1, V2, k2, den1, den2 = _scalar_state(x, theta)
        if not (den1 > 0 and den2 > 0):
            if strict:
                raise ParticleInvalidError("x1 + k1 or x2 + k2 is not positive", particles=True)
            return np.full((3, 3), np.nan)
        s1 = V1 * k1 / (den1 * den1)
        s2 = V2 * k2 / (den2 * den2)
        return np.array([[-s1, 0.0, 0.0], [s1, -s2, 0.0], [0.0, s2, -consts.lam]])
    V1, k1, V2, k2, den1, den2, bad = _mm_terms(x, theta)
    if strict and np.any(bad):
        raise ParticleInvalidError("x1 + k1 or x2 + k2 is not positive", particles=bad)
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = V1 * k1 / (den1 * den1)
        s2 = V2 * k2 / (den2 * den2)
    shape = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1])
    J = np.zeros(shape + (3, 3))
    J[..., 0, 0] = -s1
    J[..., 1, 0] = s1
    J[..., 1, 1] = -s2
    J[..., 2, 1] = s2
    J[..., 2, 2] = -consts.lam
    if np.any(bad):
        J[bad] = np.nan
    return J


class MetabolicModel(OdeModel):
    """Three-state Michaelis-Menten chain with parameters ``(V1, k1, V2, k2)``."""

    dim = 3
    param_dim = 4
    param_names = ("V1", "k1", "V2", "k2")
    log_params = (True, True, True, True)
    linear = False

    def __init__(self, consts: MetabolicConstants | None = None):
        self.consts = consts or MetabolicConstants()

    def rhs(self, t, x, theta):
        return metabolic_rhs(t, x, theta, self.consts, strict=False)

    def jacobian(self, t, x, theta):
        return metabolic_jacobian(x, theta, self.consts, strict=False)


# -- advection-diffusion ---------------------------------------------------


def cholesky_to_diffusion(k1, k2, k3):
    """Diffusion entries ``(d11, d12, d22)`` of ``K^T K`` with ``K = [[k1, k3], [0, k2]]``."""
    if not (k1 > 0 and k2 > 0):
        raise ConfigError("k1 and k2 must be positive for a positive definite diffusion")
    return k1 * k1, k1 * k3, k2 * k2 + k3 * k3


def gaussian_plume_ic(n: int) -> np.ndarray:
    """Sum of six Gaussian plumes on the periodic ``(n-1) x (n-1)`` grid.

    Points are ``{0, 1/m, ..., (m-1)/m}`` in each direction (``m = n - 1``);
    the result is stacked with x varying fastest.
    """
    if n < 3:
        raise InvalidDimensionError("grid parameter n must be at least 3")
    m = n - 1
    g = np.arange(m) / m
    X, Y = np.meshgrid(g, g, indexing="ij")
    u = np.zeros_like(X)
    for gam, xc, yc in zip(PLUME_STD, PLUME_XC, PLUME_YC):
        u += np.exp(-((X - xc) ** 2 + (Y - yc) ** 2) / (2 * gam * gam)) / (gam * math.sqrt(2 * math.pi))
    return u.ravel(order="F")


class AdvDiffModel(OdeModel):
    """Periodic 2D advection-diffusion, parameters ``(k1, k2, k3, c1, c2)``.

    ``B1 = I (x) l``, ``B2 = l (x) I`` and their Gram combinations are built
    once; :meth:`assemble_operator` only forms a linear combination of their
    values on a shared sparsity pattern.
    """

    param_names = ("k1", "k2", "k3", "c1", "c2")
    param_dim = 5
    log_params = (True, True, False, False, False)
    linear = True

    def __init__(self, n: int, scale: float = 1.0):
        if n < 3:
            raise InvalidDimensionError("grid parameter n must be at least 3")
        self.n = n
        self.m = n - 1
        self.dim = self.m * self.m
        self.scale = scale
        ell = periodic_diff_matrix(self.m, scale)
        eye = CsrMatrix.identity(self.m)
        self.B1 = kron(eye, ell)
        self.B2 = kron(ell, eye)
        b1, b2 = self.B1.to_scipy(), self.B2.to_scipy()
        g11 = (b1.T @ b1).tocsr()
        g22 = (b2.T @ b2).tocsr()
        g12 = (b1.T @ b2 + b2.T @ b1).tocsr()
        self.G11, self.G22, self.G12 = (CsrMatrix.from_scipy(g) for g in (g11, g22, g12))
        # shared pattern: the union of all five structures
        pattern = abs(g11) + abs(g22) + abs(g12) + abs(b1) + abs(b2)
        pattern = sp.csr_matrix(pattern)
        pattern.sum_duplicates()
        pattern.sort_indices()
        self._indptr = pattern.indptr.astype(np.int64)
        self._indices = pattern.indices.astype(np.int64)
        self._vals = {
            name: self._on_pattern(mat)
            for name, mat in (("g11", g11), ("g22", g22), ("g12", g12), ("b1", b1), ("b2", b2))
        }
        self._eye_diag = self._on_pattern(sp.identity(self.dim, format="csr"))
        self._diag_pos = None

    def _on_pattern(self, mat) -> np.ndarray:
        mat = sp.csr_matrix(mat)
        out = np.zeros(self._indices.size)
        for i in range(self.dim):
            lo, hi = self._indptr[i], self._indptr[i + 1]
            cols = self._indices[lo:hi]
            mlo, mhi = mat.indptr[i], mat.indptr[i + 1]
            pos = np.searchsorted(cols, mat.indices[mlo:mhi])
            out[lo + pos] = mat.data[mlo:mhi]
        return out

    def operator_values(self, theta) -> np.ndarray:
        k1, k2, k3, c1, c2 = (float(v) for v in theta)
        v = self._vals
        diff = (k1 * k1) * v["g11"] + (k1 * k3) * v["g12"] + (k2 * k2 + k3 * k3) * v["g22"]
        return -diff + c1 * v["b1"] + c2 * v["b2"]

    def assemble_operator(self, theta) -> CsrMatrix:
        return CsrMatrix(self.dim, self.dim, self._indptr, self._indices, self.operator_values(theta))

    def _scipy_operator(self, theta) -> sp.csr_matrix:
        m = sp.csr_matrix((self.operator_values(theta), self._indices, self._indptr), shape=(self.dim, self.dim))
        m.has_sorted_indices = True
        return m

    def rhs(self, t, x, theta):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        if theta.ndim == 1:
            L = self._scipy_operator(theta)
            return (L @ x.T).T if x.ndim == 2 else L @ x
        return np.stack([self._scipy_operator(th) @ xi for th, xi in zip(theta, x)])

    def jacobian(self, t, x, theta):
        return self.assemble_operator(theta)

    def bind(self, theta) -> "BoundLinear":
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return BoundLinear(self, [self._scipy_operator(theta)], batched=False)
        return BoundLinear(self, [self._scipy_operator(th) for th in theta], batched=True)


class BoundLinear:
    """Bound linear system ``x' = L_i x`` with one sparse operator per particle.

    Iteration matrices ``I - hb0 L_i`` and their factorizations are cached per
    ``hb0`` value, which is legitimate because the Jacobian is state independent.
    Only the most recent few step sizes are kept, since adaptive stepping
    produces a new ``hb0`` on almost every step.
    """

    cache_size = 4

    def __init__(self, model: OdeModel, ops, batched: bool):
        self.model = model
        self.ops = ops
        self.batched = batched
        self._stacked = None
        self._cache = OrderedDict()
        self.jacobian_assemblies = 0

    def rhs(self, t, x, idx=None):
        if not self.batched:
            return self.ops[0] @ x
        if idx is None:
            if self._stacked is None:
                self._stacked = block_diag_csr(self.ops)
            return (self._stacked @ x.ravel()).reshape(x.shape)
        return np.stack([self.ops[i] @ xi for i, xi in zip(idx, x)])

    def iteration_matrix(self, t, x, hb0, idx=None) -> BlockDiag:
        key = float(hb0)
        full = self._cache.get(key)
        if full is None:
            self.jacobian_assemblies += 1
            d = self.model.dim
            if d > SPARSE_BLOCK_THRESHOLD:
                if d <= DENSE_LU_MAX:
                    mats = [np.eye(d) - key * L.toarray() for L in self.ops]
                else:
                    eye = sp.identity(d, format="csr")
                    mats = [(eye - key * L).tocsc() for L in self.ops]
                full = BlockDiag(d, len(mats), mats)
                full.factors = [None] * len(mats)
            else:
                full = block_diag_assemble(np.stack([np.eye(d) - key * L.toarray() for L in self.ops]))
            self._cache[key] = full
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        if idx is None:
            sel = np.arange(full.nblocks)
        else:
            sel = np.asarray(idx)
        if not full.sparse:
            return full if idx is None else BlockDiag(full.block_dim, sel.size, full.blocks[sel])
        # factor lazily per block and share factors with the cached full matrix
        for i in sel:
            if full.factors[i] is None:
                full.factors[i] = factor_block(full.blocks[i]) or False
        sub = BlockDiag(full.block_dim, sel.size, [full.blocks[i] for i in sel])
        sub.factors = [full.factors[i] or None for i in sel]
        return sub


# -- small generic models ----------------------------------------------------


class LinearModel(OdeModel):
    """``x' = A x`` for a fixed dense matrix (no parameters)."""

    linear = True

    def __init__(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise InvalidDimensionError("A must be square")
        self.A = A
        self.dim = A.shape[0]

    def rhs(self, t, x, theta=None):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for j in range(self.dim):
            out = out + self.A[:, j] * x[..., j, None]
        return out

    def jacobian(self, t, x, theta=None):
        x = np.asarray(x)
        return np.broadcast_to(self.A, x.shape[:-1] + self.A.shape).copy()


class DecayModel(OdeModel):
    """Scalar ``x' = -theta x`` with a positive rate, used by small hand traces."""

    dim = 1
    param_dim = 1
    param_names = ("rate",)
    log_params = (True,)
    linear = True

    def rhs(self, t, x, theta):
        return -np.asarray(theta)[..., :1] * np.asarray(x)

    def jacobian(self, t, x, theta):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x)
        shape = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1])
        J = np.empty(shape + (1, 1))
        J[..., 0, 0] = -theta[..., 0]
        return J


class FunctionModel(OdeModel):
    """Wrap plain callables ``f(t, x, theta)`` and ``jac(t, x, theta)``."""

    def __init__(self, f, jac, dim, param_dim=0, linear=False):
        self._f = f
        self._jac = jac
        self.dim = dim
        self.param_dim = param_dim
        self.linear = linear
        self.param_names = tuple(f"p{i}" for i in range(param_dim))
        self.log_params = (False,) * param_dim

    def rhs(self, t, x, theta=None):
        return np.asarray(self._f(t, np.asarray(x, dtype=float), theta), dtype=float)

    def jacobian(self, t, x, theta=None):
        return np.asarray(self._jac(t, np.asarray(x, dtype=float), theta), dtype=float)
