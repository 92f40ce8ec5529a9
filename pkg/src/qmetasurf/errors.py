"""Exception and warning types shared across the package."""


class DegenerateSeparationError(ValueError):
    """Two dipoles sit closer than the minimum allowed separation."""

    def __init__(self, message, pairs=None):
        super().__init__(message)
        self.pairs = list(pairs) if pairs is not None else []


class InvalidRegularizerError(ValueError):
    pass


class InvalidProfileError(ValueError):
    pass


class AmbiguousContourError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class ConvergenceWarning(UserWarning):
    pass


class IntegrationAccuracyError(RuntimeError):
    """Loss bookkeeping disagrees beyond the configured tolerance."""
