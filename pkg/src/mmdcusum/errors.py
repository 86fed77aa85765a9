"""Exception hierarchy shared by every module."""


class MMDCusumError(Exception):
    """Base class for all errors raised by this package."""


class InputError(MMDCusumError, ValueError):
    """Malformed data: wrong shapes, non-finite values, empty inputs."""


class ConfigurationError(MMDCusumError, ValueError):
    """Invalid or inconsistent parameters."""


class CalibrationError(MMDCusumError):
    """A data-driven calibration step could not produce a usable value."""


class AnalysisError(MMDCusumError):
    """A post-processing step (fit, envelope) is not well defined."""


class SizeError(InputError):
    """The requested exact computation is too large."""
