"""scikit-learn style wrapper around the sampler.

>>> est = ParticleFilterEstimator(problem="metabolic", n_particles=50)   # doctest: +SKIP
>>> est.fit(Y, times).theta_mean_                                       # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .backends import make_backend
from .bench import make_problem
from .errors import ConfigError
from .lmm import adaptive_bdf_interval, make_integrator
from .pfsmc import ObservationModel, PfConfig, run


class ParticleFilterEstimator(BaseEstimator):
    """Estimate ODE parameters from a ``(T, m)`` observation matrix.

    ``fit(Y, times)`` runs the filter; ``predict(times)`` integrates the model
    from the initial state with the posterior-mean parameters and returns the
    observed components.  ``model`` may be an :class:`~lmmpf.models.OdeModel`
    instance, in which case ``prior_mean``, ``prior_std``, ``x0`` and
    ``obs_indices`` are required.
    """

    def __init__(self, problem="metabolic", model=None, n=10, integrator="bdf2", h=None,
                 rtol=1e-3, n_particles=1000, a=0.98, seed=42, backend="seq", workers=2,
                 sigma=None, obs_indices=None, prior_mean=None, prior_std=None, x0=None,
                 x0_std=None, t0=0.0):
        self.problem = problem
        self.model = model
        self.n = n
        self.integrator = integrator
        self.h = h
        self.rtol = rtol
        self.n_particles = n_particles
        self.a = a
        self.seed = seed
        self.backend = backend
        self.workers = workers
        self.sigma = sigma
        self.obs_indices = obs_indices
        self.prior_mean = prior_mean
        self.prior_std = prior_std
        self.x0 = x0
        self.x0_std = x0_std
        self.t0 = t0

    def _resolve(self):
        if self.model is not None:
            missing = [k for k in ("prior_mean", "prior_std", "x0", "obs_indices")
                       if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"a custom model needs {missing}")
            return (self.model, np.asarray(self.prior_mean, float), np.asarray(self.prior_std, float),
                    np.asarray(self.x0, float), 0.0 if self.x0_std is None else self.x0_std,
                    np.asarray(self.obs_indices, int), self.h)
        prob = make_problem(self.problem, self.n, seed=self.seed)
        pick = lambda v, d: d if v is None else np.asarray(v, float)  # noqa: E731
        return (prob.model, pick(self.prior_mean, prob.prior_mean), pick(self.prior_std, prob.prior_std),
                pick(self.x0, prob.x0), pick(self.x0_std, prob.x0_std),
                prob.obs_indices if self.obs_indices is None else np.asarray(self.obs_indices, int),
                prob.default_h if self.h is None else self.h)

    def fit(self, Y, times):
        Y = check_array(Y, ensure_2d=True, dtype=float)
        times = np.asarray(times, dtype=float).ravel()
        if times.size != Y.shape[0]:
            raise ConfigError("times and Y must have the same number of rows")
        model, pm, ps, x0, x0s, idx, h = self._resolve()
        if Y.shape[1] != idx.size:
            raise ConfigError(f"Y has {Y.shape[1]} columns but {idx.size} components are observed")
        sigma = self.sigma
        if sigma is None:
            raise ConfigError("sigma (observation noise standard deviation) is required")
        cfg = PfConfig(N=self.n_particles, integrator=make_integrator(self.integrator, h=h, rtol=self.rtol),
                       prior_mean=pm, prior_std=ps, x0_mean=x0, x0_std=x0s, a=self.a, seed=self.seed)
        obs = ObservationModel(idx, float(sigma))
        with make_backend(self.backend, workers=self.workers) as be:
            self.trace_ = run(times, Y, cfg, be, model, obs, t0=self.t0)
            self.work_report_ = be.report
        self.model_ = model
        self.x0_ = x0
        self.obs_indices_ = idx
        self.theta_mean_ = self.trace_.theta_mean[-1].copy()
        self.theta_std_ = np.sqrt(np.maximum(self.trace_.theta_var[-1], 0.0))
        self.n_features_in_ = Y.shape[1]
        return self

    def predict(self, times):
        check_is_fitted(self, "theta_mean_")
        times = np.asarray(times, dtype=float).ravel()
        bound = self.model_.bind(self.theta_mean_)
        x, prev, out = self.x0_, self.t0, []
        for t in times:
            if t > prev:
                x = adaptive_bdf_interval(self.model_, self.theta_mean_, x, prev, t, 1e-6, bound=bound).state
                prev = t
            out.append(x[self.obs_indices_])
        return np.array(out)
