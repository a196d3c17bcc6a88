"""Exception types shared across the package."""


class RiskAviError(Exception):
    """Base class for all errors raised by riskavi."""


class ParameterError(RiskAviError, ValueError):
    """A numeric parameter is outside its admissible range."""


class InputError(RiskAviError, ValueError):
    """Malformed data: empty samples, bad shapes, unnormalized distributions."""


class ConvergenceError(RiskAviError, RuntimeError):
    """An iterative procedure did not settle within its iteration cap."""
