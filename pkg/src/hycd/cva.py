"""Compressed change vector analysis (C2VA): spectral change magnitude and direction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, ValidationError
from .raster import ChangeMap, RasterImage, ScalarMap, union_nodata
from .threshold import apply_threshold, percentile_threshold

ZERO_CHANGE_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class ReferenceVector:
    components: np.ndarray

    def __post_init__(self):
        c = np.array(self.components, dtype=np.float64, copy=True).ravel()
        if c.size < 1:
            raise DomainError("reference vector needs at least one component")
        if abs(np.linalg.norm(c) - 1.0) > 1e-6:
            raise ValidationError("reference vector must have unit norm")
        c.flags.writeable = False
        object.__setattr__(self, "components", c)

    @classmethod
    def from_direction(cls, direction) -> "ReferenceVector":
        d = np.asarray(direction, dtype=np.float64)
        return cls(d / np.linalg.norm(d))

    def __len__(self):
        return self.components.size


def default_reference(B: int) -> ReferenceVector:
    """The equal-weight unit vector (sqrt(B)/B, ..., sqrt(B)/B)."""
    if B < 1:
        raise DomainError("band count must be >= 1")
    return ReferenceVector(np.full(B, math.sqrt(B) / B))


def _difference(before: RasterImage, after: RasterImage):
    if before.shape != after.shape:
        raise ShapeError(f"image shapes differ: {before.shape} vs {after.shape}")
    diff = after.data.astype(np.float64) - before.data.astype(np.float64)
    return diff, union_nodata(before.nodata_mask, after.nodata_mask)


def change_magnitude(before: RasterImage, after: RasterImage) -> ScalarMap:
    diff, nodata = _difference(before, after)
    rho = np.sqrt(np.einsum("khw,khw->hw", diff, diff))
    if nodata is not None:
        rho[nodata] = 0.0
    return ScalarMap(rho, "magnitude", nodata)


def phase_angle(before: RasterImage, after: RasterImage,
                ref: ReferenceVector | None = None) -> ScalarMap:
    """Angle between each pixel's change vector and ``ref``, in [0, pi].

    Pixels whose change vector has norm below 1e-12 have no direction and
    are returned as nodata.
    """
    diff, nodata = _difference(before, after)
    if ref is None:
        ref = default_reference(before.bands)
    if len(ref) != before.bands:
        raise ShapeError(f"reference has {len(ref)} components for {before.bands} bands")
    norm = np.sqrt(np.einsum("khw,khw->hw", diff, diff))
    dot = np.einsum("khw,k->hw", diff, ref.components)
    undefined = norm < ZERO_CHANGE_NORM
    cos = np.clip(dot / np.where(undefined, 1.0, norm), -1.0, 1.0)
    theta = np.arccos(cos)
    nodata = union_nodata(nodata, undefined if undefined.any() else None)
    if nodata is not None:
        theta[nodata] = 0.0
    return ScalarMap(theta, "angle_radians", nodata)


def c2va_change_map(before: RasterImage, after: RasterImage, percentile: float = 90.0,
                    ref: ReferenceVector | None = None):
    """Magnitude/angle maps and the percentile-thresholded change mask.

    Returns ``(change_map, magnitude, angle)``. Ties at the threshold count as
    no change, so an identical pair yields an empty mask.
    """
    rho = change_magnitude(before, after)
    theta = phase_angle(before, after, ref)
    T = percentile_threshold(rho, percentile)
    cmap = apply_threshold(rho, T, f"c2va_p{percentile:g}")
    return cmap, rho, theta
