"""Exception hierarchy shared across the package.

File-format problems map to distinct classes so callers (and tests) can
tell a bad magic number from a truncated payload from a shape conflict.
"""


class GatedPromptError(Exception):
    """Base class for all package errors."""


class DimensionError(GatedPromptError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class BoundsError(GatedPromptError, IndexError):
    """A slice or index is outside the valid range."""


class DomainError(GatedPromptError, ValueError):
    """A numeric argument is outside its mathematical domain."""


class NumericError(GatedPromptError, ArithmeticError):
    """A non-finite value (NaN or Inf) was produced or supplied."""


class StateError(GatedPromptError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class DeterminismError(GatedPromptError, RuntimeError):
    """A function re-evaluated under identical inputs gave a different value."""


class ConfigError(GatedPromptError, ValueError):
    """A configuration value or file is invalid."""


class ModeError(ConfigError):
    """An artifact was produced under an incompatible tuning mode."""


class DegenerateGatesError(GatedPromptError, ValueError):
    """All accumulated gate weights are zero; selection ratios are undefined."""


class FileFormatError(GatedPromptError, ValueError):
    """Base class for binary file-format violations."""


class BadMagicError(FileFormatError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(FileFormatError):
    """The file carries an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """The file ends before the header or payload is complete."""


class PayloadMismatchError(FileFormatError):
    """The header-declared dimensions disagree with the payload length."""


class ParameterShapeError(FileFormatError):
    """A stored parameter's shape conflicts with the expected configuration."""


class TrainingAbort(GatedPromptError, RuntimeError):
    """Training stopped because the loss became non-finite."""
