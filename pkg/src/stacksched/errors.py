"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration values."""


class CalibrationError(RuntimeError):
    """Thermal calibration could not reach its target."""


class FitError(RuntimeError):
    """Model fitting failed (e.g. kernel matrix not positive definite)."""


class TrainingError(RuntimeError):
    """Policy training cannot proceed (e.g. empty demonstration pool)."""


class DecisionError(RuntimeError):
    """Illegal scheduling decision (e.g. migration onto an occupied core)."""
