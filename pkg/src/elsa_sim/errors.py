"""Exception taxonomy shared across the simulator.

The CLI maps ConfigError/UsageError to exit code 2 and every other SimError
to exit code 3.
"""


class SimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimError):
    """Invalid configuration: bad geometry, unknown keys, inconsistent sizes."""


class InputError(SimError):
    """Invalid runtime input: shape mismatch, out-of-range ids or labels."""


class NumericError(SimError):
    """Non-finite values or a failed matrix factorization."""


class UsageError(SimError):
    """API misuse, e.g. backward before forward or a consumed tape."""


class ProtocolError(SimError):
    """Orchestration failure while a run is in flight."""


class AggregationError(ProtocolError):
    """Cloud aggregation cannot proceed (zero weights, shape mismatch)."""


class DecodeError(SimError):
    """Sketch decode attempted with mismatched parameters."""


class UnavailableError(SimError):
    """Requested artifact was not recorded (e.g. gradient logging disabled)."""
