"""Exception types raised across the package."""


class DialError(Exception):
    """Base class; ``kind`` is the tag printed by the CLI."""

    kind = "error"


class DimensionError(DialError, ValueError):
    kind = "dimension"


class LabelError(DialError, ValueError):
    kind = "label"


class StateError(DialError, RuntimeError):
    kind = "state"


class SpecError(DialError, ValueError):
    kind = "spec"


class ConfigError(DialError, ValueError):
    kind = "config"


class FormatError(DialError, ValueError):
    kind = "format"


class DataError(DialError, ValueError):
    kind = "data"


class BatchError(DialError, ValueError):
    kind = "batch"


class TrainingAborted(DialError, RuntimeError):
    kind = "training"


class CompatibilityError(DialError, ValueError):
    kind = "compatibility"
