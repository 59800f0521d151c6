"""Exception hierarchy shared by the integrators, the filter and the CLI."""


class LmmpfError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LmmpfError, ValueError):
    """Invalid configuration or inconsistent inputs."""


class InvalidDimensionError(LmmpfError, ValueError):
    pass


class InvalidWeightsError(LmmpfError, ValueError):
    pass


class NumericalError(LmmpfError, ArithmeticError):
    """Base class for failures of the numerical machinery."""


class DegenerateCovarianceError(NumericalError):
    pass


class SingularBlockError(NumericalError):
    """One or more diagonal blocks could not be factored.

    ``blocks`` holds the failing block indices; ``solution`` holds the
    solution of every other block (rows of singular blocks are NaN).
    """

    def __init__(self, blocks, solution=None):
        self.blocks = [int(b) for b in blocks]
        self.solution = solution
        super().__init__(f"singular diagonal block(s): {self.blocks}")


class ParticleInvalidError(NumericalError):
    """A right-hand side evaluation left the admissible domain."""

    def __init__(self, message, particles=None):
        self.particles = particles
        super().__init__(message)


class NewtonDivergenceError(NumericalError):
    def __init__(self, message, last_iterate=None):
        self.last_iterate = last_iterate
        super().__init__(message)


class StiffnessError(NumericalError):
    """Adaptive step size underflowed."""


class TotalDegeneracyError(NumericalError):
    """Every particle has zero likelihood."""


class WorkerError(LmmpfError, RuntimeError):
    """A per-particle task failed for a reason other than a numerical failure."""

    def __init__(self, index, message):
        self.index = int(index)
        self.message = str(message)
        super().__init__(self.index, self.message)

    def __str__(self):
        return f"particle {self.index}: {self.message}"
