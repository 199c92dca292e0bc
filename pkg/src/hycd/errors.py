"""Exception hierarchy shared by every hycd module."""


class HycdError(Exception):
    """Base class for all library errors."""


class FormatError(HycdError):
    """A file header or payload could not be parsed."""


class SizeError(HycdError):
    """A binary payload does not have the length its header promises."""


class ValidationError(HycdError, ValueError):
    """A value violates a type invariant (non-finite data, bad parameters)."""


class ShapeError(HycdError, ValueError):
    """Array dimensions of two operands do not agree."""


class BoundsError(HycdError, IndexError):
    """An index or window falls outside the image."""


class DomainError(HycdError, ValueError):
    """An argument is outside the mathematical domain of the operation."""


class EmptyStatisticsError(HycdError):
    """A statistic was requested over zero valid pixels."""


class DegenerateDistributionError(HycdError):
    """Histogram thresholding needs at least two distinct values."""


class ClusteringDegeneracyError(HycdError):
    """Fewer distinct samples than requested clusters."""


class PaddingError(HycdError, ValueError):
    """Image dimensions are not divisible by the network downsample factor."""


class ConfigError(HycdError, ValueError):
    """A pipeline configuration document is invalid."""


class StageError(HycdError):
    """A pipeline stage failed; wraps the underlying error with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
