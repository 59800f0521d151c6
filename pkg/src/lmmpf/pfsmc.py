"""Particle filter for joint state and parameter estimation of ODE models.

One filter step, for an observation ``y`` at the end of ``[t0, t1]``:

1. shrink the parameters toward their weighted mean,
2. propagate every particle with its shrunk parameters (the predictors),
3. compute fitness weights from the predictor likelihoods and resample,
4. proliferate the resampled parameters with Gaussian noise of covariance
   ``(1 - a^2) C``,
5. repropagate from the resampled states with the new parameters and add
   innovation noise whose variance is the integrator's accumulated local
   error estimate,
6. weight every particle by the ratio of its new likelihood to its
   predictor likelihood and update the posterior moments.

Positive parameters live in log space throughout.  All random draws come
from :class:`~lmmpf.rng.RngStreams` keyed by step and particle index and are
made on the calling thread; only propagation goes through the backend.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .backends import Backend, Sequential
from .errors import ConfigError, InvalidDimensionError, TotalDegeneracyError
from .linalg import chol_psd, weighted_mean_cov
from .lmm import Integrator
from .rng import Purpose, RngStreams

log = logging.getLogger(__name__)

DEGENERACY_STEPS = 3
DEGENERACY_ESS = 1.0 + 1e-6


@dataclass
class Ensemble:
    """Particle states ``X`` (N x d), unconstrained parameters ``TH`` (N x p), log weights."""

    X: np.ndarray
    TH: np.ndarray
    logw: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.TH = np.atleast_2d(np.asarray(self.TH, dtype=float))
        self.logw = np.asarray(self.logw, dtype=float).ravel()
        N = self.logw.size
        if self.X.shape[0] != N or self.TH.shape[0] != N:
            raise InvalidDimensionError("X, TH and logw must have the same number of particles")

    @property
    def N(self) -> int:
        return self.logw.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.logw)

    def check(self, tol: float = 1e-10):
        if abs(logsumexp(self.logw)) > tol:
            raise ConfigError("weights are not normalized")
        if not (np.isfinite(self.X).all() and np.isfinite(self.TH).all()):
            raise ConfigError("ensemble has non-finite entries")


@dataclass(frozen=True)
class ObservationModel:
    """Gaussian noise of standard deviation ``sigma`` on ``x[obs_indices]``."""

    obs_indices: tuple
    sigma: float

    def __init__(self, obs_indices, sigma):
        idx = tuple(int(i) for i in np.atleast_1d(obs_indices))
        if len(set(idx)) != len(idx):
            raise ConfigError("observation indices must be distinct")
        if not (isinstance(sigma, (int, float, np.floating)) and math.isfinite(sigma) and sigma > 0):
            raise ConfigError("observation noise sigma must be positive")
        object.__setattr__(self, "obs_indices", idx)
        object.__setattr__(self, "sigma", float(sigma))

    @property
    def m(self) -> int:
        return len(self.obs_indices)

    def validate(self, d: int):
        if any(i < 0 or i >= d for i in self.obs_indices):
            raise ConfigError(f"observation indices must lie in [0, {d})")


@dataclass
class PfConfig:
    """Sampler settings.

    ``prior_mean``/``prior_std`` describe a Gaussian on the unconstrained
    parameters (log-mean and log-std for positive ones).  The initial state
    is Gaussian with ``x0_mean``/``x0_std``; a zero std fixes it.
    """

    N: int
    integrator: Integrator
    prior_mean: np.ndarray
    prior_std: np.ndarray
    x0_mean: np.ndarray
    x0_std: np.ndarray | float = 0.0
    a: float = 0.98
    seed: int = 0

    def __post_init__(self):
        if int(self.N) < 1:
            raise ConfigError("N must be >= 1")
        self.N = int(self.N)
        if not 0.0 < self.a < 1.0:
            raise ConfigError("shrinkage factor a must lie in (0, 1)")
        self.prior_mean = np.atleast_1d(np.asarray(self.prior_mean, dtype=float))
        self.prior_std = np.broadcast_to(np.asarray(self.prior_std, dtype=float),
                                         self.prior_mean.shape).copy()
        self.x0_mean = np.atleast_1d(np.asarray(self.x0_mean, dtype=float))
        self.x0_std = np.broadcast_to(np.asarray(self.x0_std, dtype=float), self.x0_mean.shape).copy()
        if np.any(self.prior_std < 0) or np.any(self.x0_std < 0):
            raise ConfigError("prior standard deviations must be nonnegative")
        if not (np.isfinite(self.prior_mean).all() and np.isfinite(self.x0_mean).all()):
            raise ConfigError("prior means must be finite")

    @property
    def s(self) -> float:
        return math.sqrt(1.0 - self.a * self.a)

    @property
    def h(self):
        return self.integrator.h

    @property
    def scheme(self):
        return self.integrator.scheme

    @property
    def rtol(self):
        return self.integrator.rtol


@dataclass
class PosteriorTrace:
    """Posterior summaries at the initial time and after every observation.

    ``phi_*`` are moments of the unconstrained parameters; ``theta_*`` are the
    weighted mean and variance of the parameters in their natural scale.
    """

    t: np.ndarray
    phi_mean: np.ndarray
    phi_cov: np.ndarray
    theta_mean: np.ndarray
    theta_var: np.ndarray
    state_mean: np.ndarray
    ess: np.ndarray
    param_names: tuple = ()
    degeneracy_warnings: list = field(default_factory=list)

    def __len__(self):
        return self.t.size

    @property
    def final_mean(self) -> np.ndarray:
        return self.theta_mean[-1]


@dataclass
class TraceRow:
    t: float
    phi_mean: np.ndarray
    phi_cov: np.ndarray
    theta_mean: np.ndarray
    theta_var: np.ndarray
    state_mean: np.ndarray
    ess: float


# -- building blocks -------------------------------------------------------------


def normalize_logw(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    if logw.size == 0 or not np.any(logw > -np.inf):
        raise TotalDegeneracyError("every particle has zero likelihood")
    return logw - logsumexp(logw)


def effective_sample_size(logw) -> float:
    """``1 / sum w^2`` for normalized log weights."""
    return float(math.exp(-logsumexp(2.0 * np.asarray(logw, dtype=float))))


def initialize(cfg: PfConfig, rng: RngStreams | None = None) -> Ensemble:
    """Draw the initial ensemble from the prior with uniform weights."""
    rng = rng or RngStreams(cfg.seed)
    p, d = cfg.prior_mean.size, cfg.x0_mean.size
    z = rng.normals(0, np.arange(cfg.N), Purpose.INIT, p + d)
    TH = cfg.prior_mean + cfg.prior_std * z[:, :p]
    X = cfg.x0_mean + cfg.x0_std * z[:, p:]
    return Ensemble(X, TH, np.full(cfg.N, -math.log(cfg.N)))


def shrink(TH, logw, a: float) -> np.ndarray:
    """Contract every row toward the weighted mean: ``a*TH + (1-a)*mean``."""
    TH = np.asarray(TH, dtype=float)
    w = np.exp(np.asarray(logw, dtype=float))
    mean, _ = weighted_mean_cov(TH, w / w.sum(), tol=1e-9)
    return a * TH + (1.0 - a) * mean


def log_likelihood(y, x, obs: ObservationModel, ok=None):
    """Gaussian log-density of ``y`` given state(s) ``x``.

    ``x`` may be a single state or an ``(N, d)`` array; particles with
    ``ok`` False or non-finite predictions get ``-inf``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != obs.m:
        raise InvalidDimensionError(f"expected {obs.m} observations, got {y.shape[-1]}")
    x = np.asarray(x, dtype=float)
    pred = x[..., list(obs.obs_indices)]
    resid = y - pred
    s2 = obs.sigma * obs.sigma
    ll = -0.5 * obs.m * math.log(2.0 * math.pi * s2) - np.sum(resid * resid, axis=-1) / (2.0 * s2)
    ll = np.where(np.isfinite(ll), ll, -np.inf)
    if ok is not None:
        ll = np.where(ok, ll, -np.inf)
    return ll if np.ndim(ll) else float(ll)


def fitness_weights(logw, loglik) -> np.ndarray:
    """Normalized ``w * likelihood``, computed in log space."""
    lg = normalize_logw(np.asarray(logw, dtype=float) + np.asarray(loglik, dtype=float))
    g = np.exp(lg)
    return g / g.sum()


def resample_multinomial(g, rng: RngStreams, j: int = 0) -> np.ndarray:
    """``N`` categorical draws with probabilities ``g``; draw ``n`` uses stream ``(j, n, resample)``."""
    g = np.asarray(g, dtype=float)
    N = g.size
    cdf = np.cumsum(g)
    u = rng.uniforms(j, np.arange(N), Purpose.RESAMPLE, 1)[:, 0] * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, N - 1)


def proliferate(TH, C, a: float, rng: RngStreams, j: int = 0) -> np.ndarray:
    """``TH + s L z`` with ``L L^T = C`` and ``s^2 = 1 - a^2``; ``z`` from stream ``(j, n, proliferate)``."""
    TH = np.asarray(TH, dtype=float)
    N, p = TH.shape
    s = math.sqrt(max(0.0, 1.0 - a * a))
    L, _ = chol_psd(np.asarray(C, dtype=float))
    if s == 0.0 or not L.any():
        return TH.copy()
    z = rng.normals(j, np.arange(N), Purpose.PROLIFERATE, p)
    step = np.zeros_like(TH)
    for k in range(p):
        step = step + z[:, k, None] * L[:, k]
    return TH + s * step


def innovate(X, gamma, rng: RngStreams, j: int = 0, ns=None) -> np.ndarray:
    """``X + sqrt(gamma) * z`` with ``z`` from stream ``(j, n, innovate)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), X.shape)
    if np.any(gamma < 0):
        raise ConfigError("innovation variances must be nonnegative")
    ns = np.arange(X.shape[0]) if ns is None else np.asarray(ns)
    z = rng.normals(j, ns, Purpose.INNOVATE, X.shape[1])
    return X + np.sqrt(gamma) * z


def update_weights(loglik_new, loglik_old) -> np.ndarray:
    """Normalized log weights proportional to ``loglik_new - loglik_old``."""
    new = np.asarray(loglik_new, dtype=float)
    old = np.asarray(loglik_old, dtype=float)
    with np.errstate(invalid="ignore"):
        diff = np.where(np.isfinite(old), new - old, -np.inf)
    diff = np.where(np.isnan(diff), -np.inf, diff)
    return normalize_logw(diff)


def posterior_row(ens: Ensemble, t: float, model) -> TraceRow:
    w = ens.weights
    w = w / w.sum()
    mean, cov = weighted_mean_cov(ens.TH, w, tol=1e-9)
    nat = model.to_natural(ens.TH)
    nmean, ncov = weighted_mean_cov(nat, w, tol=1e-9)
    xw = np.where(w[:, None] > 0, ens.X, 0.0)
    smean = w @ xw
    return TraceRow(float(t), mean, cov, nmean, np.diag(ncov).copy(), smean,
                    effective_sample_size(ens.logw))


# -- the sampler -------------------------------------------------------------------


def pf_step(ens: Ensemble, y, t0: float, t1: float, j: int, cfg: PfConfig, backend: Backend,
            model, obs: ObservationModel, rng: RngStreams | None = None):
    """Advance the ensemble over ``[t0, t1]`` and assimilate ``y``; returns ``(ensemble, row)``."""
    rng = rng or RngStreams(cfg.seed)
    rep = backend.report
    y = np.asarray(y, dtype=float)

    tic = time.perf_counter()
    w = ens.weights
    _, C = weighted_mean_cov(ens.TH, w / w.sum(), tol=1e-9)
    TH_bar = shrink(ens.TH, ens.logw, cfg.a)
    pred = backend.propagate(model, model.to_natural(TH_bar), ens.X, t0, t1, cfg.integrator)
    ll_bar = log_likelihood(y, pred.states, obs, ok=pred.ok)
    rep.add_phase("propagate", time.perf_counter() - tic)

    tic = time.perf_counter()
    g = fitness_weights(ens.logw, ll_bar)
    idx = resample_multinomial(g, rng, j)
    X_res, TH_res, ll_old = ens.X[idx], TH_bar[idx], ll_bar[idx]
    rep.add_phase("resample", time.perf_counter() - tic)

    tic = time.perf_counter()
    TH_new = proliferate(TH_res, C, cfg.a, rng, j)
    rep.add_phase("proliferate", time.perf_counter() - tic)

    tic = time.perf_counter()
    prop = backend.propagate(model, model.to_natural(TH_new), X_res, t0, t1, cfg.integrator)
    X_new = innovate(prop.states, prop.gamma, rng, j)
    rep.add_phase("repropagate", time.perf_counter() - tic)

    tic = time.perf_counter()
    ll_new = log_likelihood(y, X_new, obs, ok=prop.ok)
    logw = update_weights(ll_new, ll_old)
    # failed particles carry zero weight; keep their rows finite
    X_new = np.where(np.isfinite(X_new), X_new, X_res)
    out = Ensemble(X_new, TH_new, logw)
    row = posterior_row(out, t1, model)
    rep.add_phase("weights", time.perf_counter() - tic)
    return out, row


def _check_times(times, t0, integ: Integrator):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise InvalidDimensionError("observation times must be a vector")
    grid = np.concatenate([[t0], times])
    if times.size and np.any(np.diff(grid) <= 0):
        raise ConfigError("observation times must be increasing and after t0")
    for a, b in zip(grid[:-1], grid[1:]):
        integ.check_interval(a, b)
    return times


def run(times, Y, cfg: PfConfig, backend: Backend | None, model, obs: ObservationModel,
        t0: float = 0.0) -> PosteriorTrace:
    """Filter the whole observation sequence; the trace has ``len(times) + 1`` rows."""
    backend = backend or Sequential()
    Y = np.asarray(Y, dtype=float)
    times = _check_times(times, t0, cfg.integrator)
    if Y.ndim != 2 and times.size:
        raise InvalidDimensionError("Y must be a T x m matrix")
    if times.size and Y.shape != (times.size, obs.m):
        raise InvalidDimensionError(f"Y has shape {Y.shape}, expected {(times.size, obs.m)}")
    if cfg.x0_mean.size != model.dim or cfg.prior_mean.size != model.param_dim:
        raise InvalidDimensionError("prior dimensions do not match the model")
    obs.validate(model.dim)

    rng = RngStreams(cfg.seed)
    ens = initialize(cfg, rng)
    rows = [posterior_row(ens, t0, model)]
    warn_at = []
    low = 0
    prev = t0
    for j, (t1, y) in enumerate(zip(times, Y), start=1):
        ens, row = pf_step(ens, y, prev, t1, j, cfg, backend, model, obs, rng)
        rows.append(row)
        prev = t1
        low = low + 1 if cfg.N > 1 and row.ess < DEGENERACY_ESS else 0
        if low == DEGENERACY_STEPS:
            warn_at.append(j)
            msg = f"ensemble degenerate (ESS ~ 1) for {low} consecutive steps at step {j}"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            log.warning(msg)
    return PosteriorTrace(
        t=np.array([r.t for r in rows]),
        phi_mean=np.array([r.phi_mean for r in rows]),
        phi_cov=np.array([r.phi_cov for r in rows]),
        theta_mean=np.array([r.theta_mean for r in rows]),
        theta_var=np.array([r.theta_var for r in rows]),
        state_mean=np.array([r.state_mean for r in rows]),
        ess=np.array([r.ess for r in rows]),
        param_names=tuple(getattr(model, "param_names", ())),
        degeneracy_warnings=warn_at,
    )
