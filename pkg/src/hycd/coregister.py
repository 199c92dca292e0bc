"""
Dense coregistration of an image pair.

The flow is estimated with a coarse-to-fine, iterative Lucas-Kanade scheme:
at each pyramid level the moving image is warped by the current flow, the
local 2x2 normal equations are accumulated over a (2r+1)^2 window and solved
with a small Tikhonov term, and the flow is refined. The resulting field
maps target pixels to sampling positions in the moving image, so
``warp(moving, flow)`` lies on the target grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._resample import bilinear_sample, box_downsample, upsample_bilinear
from .errors import BoundsError, ShapeError, ValidationError
from .raster import RasterImage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 3
    window_radius: int = 8
    iterations_per_level: int = 5
    regularization_eps: float = 1e-4

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValidationError("pyramid_levels must be >= 1")
        if self.window_radius < 1:
            raise ValidationError("window_radius must be >= 1")
        if self.iterations_per_level < 1:
            raise ValidationError("iterations_per_level must be >= 1")
        if not self.regularization_eps > 0:
            raise ValidationError("regularization_eps must be > 0")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement (u along x, v along y), in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float32, copy=True)
        v = np.array(self.v, dtype=np.float32, copy=True)
        if u.ndim != 2 or u.shape != v.shape:
            raise ShapeError(f"flow components differ in shape: {u.shape} vs {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValidationError("flow contains non-finite values")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def max_displacement(self) -> float:
        """Largest per-component displacement, max(|u|, |v|)."""
        return float(max(np.abs(self.u).max(), np.abs(self.v).max()))

    def to_raster(self) -> RasterImage:
        return RasterImage(np.stack([self.u, self.v]))

    @classmethod
    def from_raster(cls, img: RasterImage) -> "FlowField":
        if img.bands != 2:
            raise ShapeError(f"flow rasters have 2 bands (u, v), found {img.bands}")
        return cls(img.data[0], img.data[1])

    @classmethod
    def constant(cls, width, height, u, v) -> "FlowField":
        return cls(np.full((height, width), u), np.full((height, width), v))


def _standardize(plane, valid):
    plane = np.asarray(plane, dtype=np.float64)
    vals = plane[valid]
    mean = vals.mean()
    std = vals.std()
    out = plane - mean
    if std > 0:
        out /= std
    out[~valid] = 0.0
    return out


def _window_sum(a, r):
    """Sum over the (2r+1)^2 window, truncated at the image border."""
    h, w = a.shape
    s = np.zeros((h + 1, w + 1))
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    y = np.arange(h)
    x = np.arange(w)
    ya, yb = np.maximum(y - r, 0), np.minimum(y + r + 1, h)
    xa, xb = np.maximum(x - r, 0), np.minimum(x + r + 1, w)
    return (s[yb][:, xb] - s[ya][:, xb] - s[yb][:, xa] + s[ya][:, xa])


def _central_gradients(p):
    gx = 0.5 * (np.concatenate([p[:, 1:], p[:, -1:]], 1) - np.concatenate([p[:, :1], p[:, :-1]], 1))
    gy = 0.5 * (np.concatenate([p[1:], p[-1:]], 0) - np.concatenate([p[:1], p[:-1]], 0))
    return gx, gy


def _refine_level(target, moving, u, v, params):
    h, w = target.shape
    gy_idx, gx_idx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = params.window_radius
    eps = params.regularization_eps
    for _ in range(params.iterations_per_level):
        warped, _ = bilinear_sample(moving, gx_idx + u, gy_idx + v, clamp=True)
        ix, iy = _central_gradients(warped)
        it = warped - target
        ixx, ixy, iyy = ix * ix, ix * iy, iy * iy
        a = _window_sum(ixx, r)
        b = _window_sum(ixy, r)
        c = _window_sum(iyy, r)
        # residual over the window is re-expressed at the centre pixel's own
        # flow (first order), otherwise neighbouring flow noise feeds back
        bx = _window_sum(ix * it - ixx * u - ixy * v, r) + a * u + b * v
        by = _window_sum(iy * it - ixy * u - iyy * v, r) + b * u + c * v
        a = a + eps
        c = c + eps
        det = a * c - b * b
        u = u + (-c * bx + b * by) / det
        v = v + (b * bx - a * by) / det
    return u, v


def compute_flow(target: RasterImage, moving: RasterImage,
                 params: FlowParams = FlowParams()) -> FlowField:
    """Estimate the dense flow registering single-band ``moving`` onto ``target``.

    Both images are standardized (zero mean, unit variance over valid
    pixels) first, which removes global gain/offset differences and keeps
    ``regularization_eps`` meaningful regardless of radiometric units.
    """
    if target.bands != 1 or moving.bands != 1:
        raise ShapeError("compute_flow expects single-band images")
    if target.shape != moving.shape:
        raise ShapeError(f"image shapes differ: {target.shape} vs {moving.shape}")

    t0 = _standardize(target.data[0], target.valid_mask)
    m0 = _standardize(moving.data[0], moving.valid_mask)
    pyramid = [(t0, m0)]
    for _ in range(params.pyramid_levels - 1):
        t, m = pyramid[-1]
        if min(t.shape) < 8:
            break
        pyramid.append((box_downsample(t), box_downsample(m)))

    t, _ = pyramid[-1]
    u = np.zeros(t.shape)
    v = np.zeros(t.shape)
    for level in range(len(pyramid) - 1, -1, -1):
        t, m = pyramid[level]
        if u.shape != t.shape:
            scale_y = t.shape[0] / u.shape[0]
            scale_x = t.shape[1] / u.shape[1]
            u = upsample_bilinear(u, t.shape) * scale_x
            v = upsample_bilinear(v, t.shape) * scale_y
        u, v = _refine_level(t, m, u, v, params)
    return FlowField(u, v)


def warp(img: RasterImage, flow: FlowField) -> RasterImage:
    """Resample every band at ``(x + u, y + v)``; samples leaving the image become nodata."""
    if (img.height, img.width) != flow.u.shape:
        raise ShapeError(f"flow {flow.u.shape} does not match image {(img.height, img.width)}")
    h, w = img.height, img.width
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = gx + flow.u
    ys = gy + flow.v

    out = np.empty(img.shape, dtype=np.float32)
    inside = None
    for k in range(img.bands):
        vals, inside = bilinear_sample(img.data[k], xs, ys)
        out[k] = vals
    nodata = ~inside
    if img.nodata_mask is not None:
        # any source neighbour with nonzero weight that is nodata taints the sample
        src_bad, _ = bilinear_sample(img.nodata_mask.astype(np.float64), xs, ys)
        nodata |= src_bad > 0
    out[:, nodata] = 0.0
    return RasterImage(out, img.wavelengths_nm, nodata)


def coregister_pair(before: RasterImage, after: RasterImage, band_index: int,
                    params: FlowParams = FlowParams()):
    """Register ``after`` onto ``before`` using one band; returns (warped_after, flow)."""
    if before.shape != after.shape:
        raise ShapeError(f"pair shapes differ: {before.shape} vs {after.shape}")
    if not 0 <= band_index < before.bands:
        raise BoundsError(f"band_index {band_index} out of range for {before.bands} bands")
    flow = compute_flow(before.band(band_index), after.band(band_index), params)
    max_shift = flow.max_displacement()
    logger.info("coregistration on band %d: max displacement %.3f px", band_index, max_shift)
    if max_shift >= 5.0:
        logger.warning("max displacement %.2f px exceeds the expected 5 px regime", max_shift)
    return warp(after, flow), flow
