"""Exception hierarchy shared by all modules."""


class BiphotonError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(BiphotonError, ValueError):
    """Inconsistent or non-physical configuration."""


class ResolutionError(BiphotonError):
    """A numerical grid is too coarse or too narrow for the requested quantity."""


class ShapeError(BiphotonError):
    """A curve does not have the shape an operation requires (e.g. no half-maximum crossing)."""


class StiffnessError(BiphotonError):
    """Adaptive step size fell below the configured minimum."""


class FitError(BiphotonError):
    """Least-squares fit is underdetermined or did not converge."""


class StatisticsError(BiphotonError):
    """Too few events to form the requested estimate."""


class UndefinedHistogramError(StatisticsError):
    """A correlation histogram needs events in a channel that is empty."""
