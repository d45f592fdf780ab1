"""Exception types shared across the crowngen modules."""


class CrownGenError(Exception):
    """Base class for all crowngen errors."""


class OutOfBounds(CrownGenError):
    """A point maps to a voxel index outside the grid."""

    def __init__(self, point, index):
        self.point = tuple(float(c) for c in point)
        self.index = tuple(int(i) for i in index)
        super().__init__(f"point {self.point} maps to voxel {self.index} outside the grid")


class EmptyVolume(CrownGenError):
    """An occupancy volume with no occupied voxel where at least one is required."""


class EmptyCloud(CrownGenError):
    """A point cloud with no points where at least one is required."""


class NoSurface(CrownGenError):
    """The scalar field never crosses the requested iso level."""


class TooFewPoints(CrownGenError):
    """Fewer points than a neighborhood estimator needs."""


class NormalsMissing(CrownGenError):
    """An operation requires per-point normals and the cloud has none."""


class PointOutsideGrid(CrownGenError):
    """A physical point lies outside the grid region an operation supports."""


class ShapeMismatch(CrownGenError):
    """Two arrays that must agree in shape do not."""


class WeightLengthMismatch(CrownGenError):
    """Per-point weight vectors whose lengths disagree with their clouds."""


class UnknownLabel(CrownGenError):
    """A tooth-position label outside the 32 permanent-dentition codes."""


class NonFiniteLoss(CrownGenError):
    """A training loss term evaluated to NaN or infinity."""

    def __init__(self, term, value):
        self.term = term
        self.value = float(value)
        super().__init__(f"loss term '{term}' is non-finite ({value})")


class StageError(CrownGenError):
    """Wraps a module error with the pipeline stage it occurred in."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}': {cause}")


class ConfigError(CrownGenError):
    """Invalid or inconsistent configuration."""


class DataError(CrownGenError):
    """Missing, malformed, or unreadable input data."""
