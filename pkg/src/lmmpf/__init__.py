"""Particle-filter parameter estimation for stiff ODEs with linear multistep integrators."""

from .backends import Batched, Parallel, Sequential, WorkReport, make_backend, map_particles
from .errors import (
    ConfigError,
    DegenerateCovarianceError,
    LmmpfError,
    NewtonDivergenceError,
    NumericalError,
    ParticleInvalidError,
    SingularBlockError,
    StiffnessError,
    TotalDegeneracyError,
    WorkerError,
)
from .estimator import ParticleFilterEstimator
from .lmm import (
    Integrator,
    adaptive_bdf_interval,
    batched_implicit_step,
    batched_propagation,
    make_integrator,
    parse_integrator,
    propagate_interval,
)
from .models import AdvDiffModel, DecayModel, MetabolicModel
from .pfsmc import Ensemble, ObservationModel, PfConfig, PosteriorTrace, run
from .rng import Purpose, RngStreams

__version__ = "0.1.0"

__all__ = [
    "AdvDiffModel", "Batched", "ConfigError", "DecayModel", "DegenerateCovarianceError", "Ensemble",
    "Integrator", "LmmpfError", "MetabolicModel", "NewtonDivergenceError", "NumericalError",
    "ObservationModel", "Parallel", "ParticleFilterEstimator", "ParticleInvalidError", "PfConfig",
    "PosteriorTrace", "Purpose", "RngStreams", "Sequential", "SingularBlockError", "StiffnessError",
    "TotalDegeneracyError", "WorkReport", "WorkerError", "adaptive_bdf_interval",
    "batched_implicit_step", "batched_propagation", "make_backend", "make_integrator",
    "map_particles", "parse_integrator", "propagate_interval", "run",
]
