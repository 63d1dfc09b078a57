"""Exception types shared across the package.

Every error the CLI can surface maps to one of these classes so that the
one-line machine-parsable error format stays stable.
"""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class ValidationError(ValueError):
    """A value violates a domain invariant (non-binary mask, bad id, ...)."""


class UnsupportedTaskError(ValueError):
    """An augmentation was asked to handle a task it is not defined for."""


class ConfigError(ValueError):
    """A configuration file or flag set is inconsistent or unknown."""


class NumericsError(RuntimeError):
    """Non-finite values appeared during a forward pass."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or unusable state)."""


class ShardError(ValueError):
    """Base class for shard-container problems."""


class ShardMagicError(ShardError):
    """The file does not start with the shard magic bytes."""


class ShardVersionError(ShardError):
    """The container version is not supported."""


class ShardTruncatedError(ShardError):
    """The file ended before the declared payload."""


class CheckpointError(ValueError):
    """A checkpoint container is malformed or incompatible."""


class RaterError(RuntimeError):
    """Base class for remote-rater failures."""


class RaterTransportError(RaterError):
    """The rater endpoint could not be reached or answered abnormally."""


class RaterSchemaError(RaterError):
    """The rater response is missing fields or is not valid JSON."""


class RaterRangeError(RaterError):
    """A rater score fell outside the allowed [0, 10] range."""
