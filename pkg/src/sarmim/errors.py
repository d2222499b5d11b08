"""Exception types shared across the package."""


class SarmimError(Exception):
    """Base class for all package errors."""


class InputError(SarmimError, ValueError):
    """Invalid input data (non-finite pixels, wrong shapes, bad records)."""


class ParameterError(SarmimError, ValueError):
    """An argument or config value is outside its allowed range."""


class ShapeError(InputError):
    """Array or grid shapes do not agree."""


class SpecError(ParameterError):
    """A scene description cannot be rendered."""


class DegenerateInputError(InputError):
    """The input is well-formed but leaves nothing to compute on."""


class IncompatibleCheckpointError(SarmimError):
    """A checkpoint does not match the requested model configuration."""


class TrainingDivergedError(SarmimError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ManifestError(InputError):
    """A corpus manifest failed validation."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class PolicyError(ParameterError):
    """A tiling policy cannot be applied to an image."""


class ConfigError(ParameterError):
    """A run configuration file has unknown keys or invalid values."""
