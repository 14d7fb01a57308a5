"""Exception types shared across the simulator."""


class ShapeError(ValueError):
    """An array does not match the shape a consumer requires."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are valid."""


class FormatError(ValueError):
    """A serialized file is malformed (bad magic, truncation, version)."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or has the wrong type."""


class ReplicaDivergenceError(RuntimeError):
    """Replicas that must agree have drifted apart."""
