"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid run configuration or model parameter.

    ``key`` names the offending configuration key when one is known.
    """

    def __init__(self, message, key=None):
        self.key = key
        if key is not None and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)


class NumericalFailure(RuntimeError):
    """A linear or nonlinear solve did not meet its residual contract."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class PicardNonconvergence(NumericalFailure):
    """The fixed-point iteration of one time step hit its iteration cap."""

    def __init__(self, message, report):
        self.report = report
        super().__init__(message, residual=report.final_increment if report else None)


class SingularityError(ValueError):
    """Applied field evaluated at a dipole location."""
