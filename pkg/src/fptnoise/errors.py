"""Exception types shared across the package.

Every error raised on purpose derives from FptNoiseError so callers (and the
CLI exit-code mapping) can distinguish expected failures from bugs.
"""


class FptNoiseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FptNoiseError):
    """A configuration or shape contract was violated (caller bug)."""


class InputError(FptNoiseError):
    """Runtime input data is invalid (bad label, zero feature, empty list)."""


class UsageError(FptNoiseError):
    """An API or CLI was invoked incorrectly."""


class FormatError(FptNoiseError):
    """A serialized file is malformed; message includes the byte offset."""


class TrainingError(FptNoiseError):
    """Training diverged; message reports the failing step."""


class DegenerateFeatureError(FptNoiseError):
    """An encoder produced a zero feature vector; drift ratios are undefined."""


class GenerationError(FptNoiseError):
    """A synthetic dataset spec cannot satisfy its separation guarantee."""
