"""Exception types shared across the package."""


class LpvMpcError(Exception):
    """Base class for package-specific failures."""


class ConfigurationError(LpvMpcError):
    """Invalid settings, missing model pieces, or malformed run configs."""


class SchemaError(LpvMpcError):
    """A serialized artifact does not match its expected schema/version."""


class NumericalError(LpvMpcError):
    """Non-finite values or a diverging numerical procedure."""


class QpFailure(LpvMpcError):
    """The QP solver reported a state the caller cannot proceed from."""
