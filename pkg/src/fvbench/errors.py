"""Exception and warning types shared across the package."""


class FvbenchError(Exception):
    """Base class for all package errors."""


class ShapeError(FvbenchError):
    """Input does not match the expected tensor shape."""


class NumericError(FvbenchError):
    """A computation produced non-finite values."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class CalibrationError(FvbenchError):
    """Threshold calibration is impossible on the given pair set."""


class ConfigError(FvbenchError):
    """Invalid configuration value or missing required input."""


class PairFileError(FvbenchError):
    """Malformed pair-list or landmark file."""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class DegenerateEmbeddingWarning(UserWarning):
    """A pre-normalization feature vector was exactly zero."""
