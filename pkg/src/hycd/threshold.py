"""
Binarization of scalar change maps.

All methods mark a pixel as change when its value is strictly greater than
the threshold, and nodata pixels are never marked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, stats

from .errors import DegenerateDistributionError, EmptyStatisticsError, ValidationError
from .raster import ChangeMap, ScalarMap

METHODS = ("percentile", "otsu", "adaptive")
ADAPTIVE_STATISTICS = ("robust", "mean")
IQR_TO_SIGMA = 1.349


@dataclass(frozen=True)
class ThresholdSpec:
    method: str = "otsu"
    percentile_p: float = 90.0
    otsu_bins: int = 256
    adaptive_window_radius: int = 48
    adaptive_k: float = 3.0
    adaptive_statistic: str = "robust"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown threshold method {self.method!r}")
        if not 0 < self.percentile_p < 100:
            raise ValidationError("percentile_p must lie in (0, 100)")
        if self.otsu_bins < 2:
            raise ValidationError("otsu_bins must be >= 2")
        if self.adaptive_window_radius < 1:
            raise ValidationError("adaptive_window_radius must be >= 1")
        if self.adaptive_statistic not in ADAPTIVE_STATISTICS:
            raise ValidationError(f"unknown adaptive statistic {self.adaptive_statistic!r}")


def nearest_rank_index(n: int, p: float) -> int:
    """Zero-based index ``ceil(p/100 * n) - 1`` of the nearest-rank percentile.

    Evaluated in exact rational arithmetic so e.g. p=90, n=100 gives 89 and
    not 90 through floating-point round-up.
    """
    if n < 1:
        raise EmptyStatisticsError("percentile of an empty set")
    if not 0 < p < 100:
        raise ValidationError("percentile must lie in (0, 100)")
    rank = math.ceil(Fraction(p) * n / 100)
    return min(max(rank, 1), n) - 1


def nearest_rank(values, p: float) -> float:
    values = np.asarray(values).ravel()
    k = nearest_rank_index(values.size, p)
    return float(np.partition(values, k)[k])


def percentile_threshold(values: ScalarMap, p: float) -> float:
    v = values.valid_values()
    if v.size == 0:
        raise EmptyStatisticsError("no valid pixels to take a percentile over")
    return nearest_rank(v, p)


def histogram_edges(v, bins):
    return np.linspace(float(v.min()), float(v.max()), bins + 1)


def bin_indices(v, edges):
    """Bin index of each value: the number of interior edges <= value."""
    return np.searchsorted(edges[1:-1], v, side="right")


def otsu_threshold(values: ScalarMap, bins: int = 256) -> float:
    """Otsu threshold over ``bins`` equal-width bins spanning [min, max].

    Candidates are the interior bin edges; the edge maximizing the between-
    class variance is returned, ties going to the lower edge. Comparisons are
    exact: with equal-width bins the variance is proportional to
    ``(s0*n1 - s1*n0)**2 / (n0*n1)`` with integer counts and bin-index sums.
    """
    if bins < 2:
        raise ValidationError("bins must be >= 2")
    v = np.asarray(values.valid_values(), dtype=np.float64)
    if v.size == 0:
        raise EmptyStatisticsError("no valid pixels for Otsu")
    if v.min() == v.max():
        raise DegenerateDistributionError("Otsu needs at least two distinct values")

    edges = histogram_edges(v, bins)
    counts = np.bincount(bin_indices(v, edges), minlength=bins).astype(np.int64)
    n_left = np.cumsum(counts)[:-1]
    s_left = np.cumsum(counts * np.arange(bins, dtype=np.int64))[:-1]
    n_total = int(counts.sum())
    s_total = int((counts * np.arange(bins)).sum())

    best_i, best_num, best_den = None, 0, 1
    for i in range(1, bins):
        n0 = int(n_left[i - 1])
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        s0 = int(s_left[i - 1])
        num = (s0 * n1 - (s_total - s0) * n0) ** 2
        den = n0 * n1
        if best_i is None or num * best_den > best_num * den:
            best_i, best_num, best_den = i, num, den
    return float(edges[best_i])


def bimodality_coefficient(values: ScalarMap) -> float:
    """Sarle's bimodality coefficient; values above 5/9 hint at bimodality."""
    v = np.asarray(values.valid_values(), dtype=np.float64)
    n = v.size
    if n < 4 or v.min() == v.max():
        return float("nan")
    g = stats.skew(v, bias=False)
    k = stats.kurtosis(v, bias=False)
    return float((g * g + 1) / (k + 3 * (n - 1) ** 2 / ((n - 2) * (n - 3))))


def apply_threshold(values: ScalarMap, T: float, tag: str) -> ChangeMap:
    return ChangeMap(values.values > T, T, tag, values.valid_mask)


def _box_sum(a, r):
    """Separable (2r+1)^2 window sums with zero padding (truncated windows)."""
    p = np.pad(a, r)
    rows = sliding_window_view(p, 2 * r + 1, axis=0).sum(axis=-1)
    return sliding_window_view(rows, 2 * r + 1, axis=1).sum(axis=-1)


def _mean_std_field(v, valid, radius):
    """Per-pixel window mean and standard deviation over valid pixels."""
    n = _box_sum(valid.astype(np.float64), radius)
    s = _box_sum(v, radius)
    s2 = _box_sum(v * v, radius)
    n_safe = np.maximum(n, 1)
    mu = s / n_safe
    sigma = np.sqrt(np.maximum(s2 / n_safe - mu * mu, 0.0))
    # flat windows: exact location, zero spread
    size = 2 * radius + 1
    lo = ndimage.minimum_filter(np.where(valid, v, np.inf), size=size, mode="constant", cval=np.inf)
    hi = ndimage.maximum_filter(np.where(valid, v, -np.inf), size=size, mode="constant", cval=-np.inf)
    flat = lo == hi
    return np.where(flat, hi, mu), np.where(flat, 0.0, sigma)


def _node_positions(n, step):
    nodes = np.arange(0, n, step)
    if nodes[-1] != n - 1:
        nodes = np.append(nodes, n - 1)
    return nodes


def _lerp_axis(nodes, n):
    """Left node index and fractional weight of every pixel along one axis."""
    pix = np.arange(n)
    left = np.clip(np.searchsorted(nodes, pix, side="right") - 1, 0, len(nodes) - 1)
    right = np.minimum(left + 1, len(nodes) - 1)
    span = np.where(right > left, nodes[right] - nodes[left], 1)
    return left, right, (pix - nodes[left]) / span


def _interpolate_nodes(field, ynodes, xnodes, shape):
    # a + f*(b - a) keeps a constant node field exactly constant
    yl, yr, fy = _lerp_axis(ynodes, shape[0])
    xl, xr, fx = _lerp_axis(xnodes, shape[1])
    rows = field[yl] + fy[:, None] * (field[yr] - field[yl])
    return rows[:, xl] + fx * (rows[:, xr] - rows[:, xl])


def _robust_field(v, valid, radius, step):
    """Window median and IQR/1.349 at grid nodes, interpolated to every pixel.

    Nodes sit every ``step`` pixels (plus the last row/column); with
    ``step=1`` the statistics are exact per pixel.
    """
    h, w = v.shape
    ynodes = _node_positions(h, step)
    xnodes = _node_positions(w, step)
    loc = np.zeros((len(ynodes), len(xnodes)))
    scale = np.zeros_like(loc)
    for i, y in enumerate(ynodes):
        ys = slice(max(y - radius, 0), min(y + radius + 1, h))
        for j, x in enumerate(xnodes):
            xs = slice(max(x - radius, 0), min(x + radius + 1, w))
            win = v[ys, xs][valid[ys, xs]]
            if win.size:
                q1, med, q3 = np.percentile(win, [25, 50, 75])
                loc[i, j] = med
                scale[i, j] = (q3 - q1) / IQR_TO_SIGMA
    return (_interpolate_nodes(loc, ynodes, xnodes, v.shape),
            _interpolate_nodes(scale, ynodes, xnodes, v.shape))


def adaptive_threshold_map(values: ScalarMap, radius: int = 48, k: float = 3.0,
                           statistic: str = "robust", step: int | None = None) -> ChangeMap:
    """Local threshold ``location_w + k * scale_w`` over the valid pixels of each window.

    Windows are (2r+1)^2 and truncated at the border.

    Args:
        values: map to binarize.
        radius: window half-size r.
        k: spread multiplier.
        statistic: ``"robust"`` uses the window median and IQR/1.349, which
            ignore a changed region covering less than a quarter of the
            window; ``"mean"`` is classic Niblack (mean and standard
            deviation, exact per pixel).
        step: node spacing for the robust statistics; defaults to
            ``max(1, radius // 4)``.
    """
    if radius < 1:
        raise ValidationError("radius must be >= 1")
    if statistic not in ADAPTIVE_STATISTICS:
        raise ValidationError(f"unknown adaptive statistic {statistic!r}")
    valid = values.valid_mask
    v = np.where(valid, values.values.astype(np.float64), 0.0)
    if statistic == "mean":
        loc, scale = _mean_std_field(v, valid, radius)
    else:
        loc, scale = _robust_field(v, valid, radius, step or max(1, radius // 4))

    with np.errstate(invalid="ignore"):
        # k*0 is nan for infinite k; nan thresholds mark nothing
        local_t = loc + k * scale
        mask = (v > local_t) & valid
    # the threshold is a field; record its mean over valid pixels
    finite = valid & np.isfinite(local_t)
    t_used = float(local_t[finite].mean()) if finite.any() else 0.0
    tag = f"adaptive(r={radius},k={k:g}{',mean' if statistic == 'mean' else ''})"
    return ChangeMap(mask, t_used, tag, valid)


def threshold_map(values: ScalarMap, spec: ThresholdSpec, tag: str | None = None) -> ChangeMap:
    """Dispatch on ``spec.method``."""
    if spec.method == "percentile":
        T = percentile_threshold(values, spec.percentile_p)
        return apply_threshold(values, T, tag or f"percentile_p{spec.percentile_p:g}")
    if spec.method == "otsu":
        T = otsu_threshold(values, spec.otsu_bins)
        return apply_threshold(values, T, tag or "otsu")
    cmap = adaptive_threshold_map(values, spec.adaptive_window_radius, spec.adaptive_k,
                                  spec.adaptive_statistic)
    if tag is None:
        return cmap
    return ChangeMap(cmap.mask, cmap.threshold_used, tag, cmap.valid_mask)
