"""Exception types shared across the package."""


class EvsfaError(Exception):
    """Base class for all package errors."""


class ParseError(EvsfaError):
    """Malformed event file or manifest."""


class GeometryError(EvsfaError):
    """Event coordinates fall outside the sensor array."""


class InsufficientDataError(EvsfaError):
    """Too few events to satisfy a sampling request."""


class RankDeficiencyError(EvsfaError):
    """Data covariance has fewer usable directions than filters requested."""


class DimensionMismatchError(EvsfaError):
    """Array shapes do not chain together."""


class ZeroVarianceError(EvsfaError):
    """A projection is constant where variance is required."""


class UnfittedBankError(EvsfaError):
    """Filter bank used for responses before normalization was fitted."""


class TrainingDivergedError(EvsfaError):
    """Loss became non-finite during CNN training."""
