"""Exception types shared across the package."""


class GroupActError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GroupActError, ValueError):
    """Operands have incompatible dimensions."""


class DomainError(GroupActError, ValueError):
    """A numeric argument is outside its valid domain."""


class DegenerateInputError(GroupActError, ValueError):
    """An input is numerically degenerate (e.g. a zero-norm row)."""


class VocabularyError(GroupActError, KeyError):
    """A label is not part of the active vocabulary."""


class EmptyBatchError(GroupActError, ValueError):
    """An operation received an empty batch."""


class DataError(GroupActError, ValueError):
    """Malformed or inconsistent data (lengths, ranges, files)."""


class UndefinedClassError(GroupActError, ValueError):
    """A per-class metric was requested for a class with no support."""


class ConfigError(GroupActError, ValueError):
    """Invalid configuration values."""


class StateError(GroupActError, RuntimeError):
    """An operation was invoked in an invalid model/pipeline state."""


class CheckpointFormatError(GroupActError, RuntimeError):
    """A checkpoint file has the wrong magic or format version."""
