"""Exception types shared across the package."""


class ObftError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(ObftError):
    """Operands have incompatible shapes; message carries the shape report."""


class NonFiniteValues(ObftError):
    """A tensor contained NaN or Inf where finite values are required."""


class SingularMatrix(ObftError):
    """Matrix inversion hit a pivot below the rejection threshold."""


class AuthenticationFailure(ObftError):
    """Caller token did not match the executor's expected secret."""


class EnvelopeError(ObftError):
    """Data envelope failed its integrity check or could not be decoded."""


class ProtocolError(ObftError):
    """Wire-protocol violation: bad frame, bad version, or unknown message."""


class TransportError(ObftError):
    """Boundary transport failed after the configured number of retries."""


class ConfigError(ObftError):
    """Experiment config file could not be parsed."""
