import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lmmpf import ParticleFilterEstimator
from lmmpf.errors import ConfigError
from lmmpf.models import DecayModel


def test_params_round_trip():
    est = ParticleFilterEstimator(n_particles=10, integrator="am2")
    assert est.get_params()["integrator"] == "am2"
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(a=0.95)
    assert est.a == 0.95


def test_fit_metabolic(metabolic_data):
    prob, data = metabolic_data
    est = ParticleFilterEstimator(n_particles=40, backend="batch", sigma=data.sigma, seed=7)
    est.fit(data.Y[:10], data.times[:10])
    assert est.theta_mean_.shape == (4,) and np.isfinite(est.theta_mean_).all()
    assert len(est.trace_) == 11
    pred = est.predict(data.times[:10])
    assert pred.shape == (10, 3) and np.isfinite(pred).all()
    assert est.work_report_.phase_times["propagate"] > 0


def test_fit_custom_model():
    times = 0.5 * np.arange(1, 9)
    Y = (2.0 * np.exp(-0.8 * times))[:, None]
    est = ParticleFilterEstimator(model=DecayModel(), integrator="bdf2", h=0.05, n_particles=300,
                                  sigma=0.02, obs_indices=[0], prior_mean=[0.0], prior_std=[0.7],
                                  x0=[2.0], seed=1)
    est.fit(Y, times)
    assert abs(est.theta_mean_[0] - 0.8) < 0.1 * 0.8
    assert np.allclose(est.predict(times)[:, 0], Y[:, 0], rtol=0.1)


def test_fit_validation(metabolic_data):
    prob, data = metabolic_data
    with pytest.raises(ConfigError):
        ParticleFilterEstimator(n_particles=5).fit(data.Y, data.times)  # no sigma
    with pytest.raises(ConfigError):
        ParticleFilterEstimator(n_particles=5, sigma=0.1).fit(data.Y, data.times[:-1])
    with pytest.raises(ConfigError):
        ParticleFilterEstimator(n_particles=5, sigma=0.1).fit(data.Y[:, :2], data.times)
    with pytest.raises(ConfigError):
        ParticleFilterEstimator(model=DecayModel(), sigma=0.1).fit(data.Y[:, :1], data.times)
    with pytest.raises(NotFittedError):
        ParticleFilterEstimator().predict([1.0])
    assert math.isfinite(data.sigma)
