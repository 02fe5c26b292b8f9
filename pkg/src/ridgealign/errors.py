"""Exception types shared across the package."""


class RidgeAlignError(Exception):
    """Base class for all package errors."""


class DimensionError(RidgeAlignError):
    """Shapes of operands are inconsistent."""


class ConfigError(RidgeAlignError):
    """Invalid configuration value."""


class ArchiveError(RidgeAlignError):
    """Weight archive is missing tensors or malformed."""


class MetricError(RidgeAlignError):
    """A score-set metric is undefined for the given input."""


class RegistrationError(RidgeAlignError):
    """Registration could not be performed (e.g. too few matches)."""
