"""Exception types shared across the package."""


class NoisyFedError(Exception):
    """Base class for all package errors."""


class ShapeError(NoisyFedError, ValueError):
    pass


class DomainError(NoisyFedError, ValueError):
    pass


class ProtocolError(NoisyFedError, RuntimeError):
    """A federation round received state that breaks the round contract."""


class ParseError(NoisyFedError, ValueError):
    """Malformed binary or text input. ``field`` names the offending item."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AssumptionViolation(NoisyFedError, ValueError):
    """Client feature marginals differ, so the noise bound does not apply."""


class ConfigError(NoisyFedError, ValueError):
    pass


class VerificationError(NoisyFedError, RuntimeError):
    pass


class DataError(NoisyFedError, RuntimeError):
    """A dataset named by an experiment spec could not be loaded."""
