"""Exception types shared across the package."""


class ModelError(ValueError):
    """An energy model or objective violates a structural requirement."""


class MeshError(ValueError):
    """Degenerate or inconsistent mesh."""


class ConfigError(ValueError):
    """Invalid run configuration."""


class ConvergenceError(RuntimeError):
    """An iterative loop hit its iteration cap.

    Attributes
    ----------
    residuals : list of float
        Residual history up to the failure.
    partial : object or None
        Partial result (e.g. a trajectory through the last accepted step).
    """

    def __init__(self, message, residuals=None, partial=None):
        super().__init__(message)
        self.residuals = list(residuals or [])
        self.partial = partial


class StationarityError(RuntimeError):
    """Recovered multiplier leaves a free-DOF residual above tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
