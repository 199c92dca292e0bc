"""
Deep change vector analysis (DCVA).

The pair is pushed through a fixed convolutional extractor, per-layer
feature differences are reduced to the channels that vary most within
pixel clusters, concatenated into a per-pixel hypervector and the norm of
that vector is thresholded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (ClusteringDegeneracyError, DegenerateDistributionError, ShapeError,
                     ValidationError)
from .extractor import FeatureExtractor, extract_features, validate_layers
from .raster import ChangeMap, RasterImage, ScalarMap, union_nodata
from .threshold import ThresholdSpec, nearest_rank, threshold_map

logger = logging.getLogger(__name__)

LAYER_PRESETS = {
    "preset1": (2, 5),
    "preset2": (2, 5, 8, 10),
    "preset3": (2, 5, 8, 10, 11, 23),
}

KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6


def parse_layers(spec) -> tuple:
    """Accept a preset name, a comma list ``"2,5"`` or a sequence of ints."""
    if isinstance(spec, str):
        if spec in LAYER_PRESETS:
            return LAYER_PRESETS[spec]
        try:
            return tuple(int(s) for s in spec.split(",") if s.strip())
        except ValueError as exc:
            raise ValidationError(f"bad layer selection {spec!r}") from exc
    return tuple(int(s) for s in spec)


def layers_label(L) -> str:
    return ",".join(str(l) for l in L)


@dataclass(frozen=True)
class SelectionParams:
    clusters_k: int = 4
    keep_percentile: float = 90.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.clusters_k < 1:
            raise ValidationError("clusters_k must be >= 1")
        if not 0 < self.keep_percentile < 100:
            raise ValidationError("keep_percentile must lie in (0, 100)")


@dataclass(frozen=True, eq=False)
class FeatureDelta:
    """Feature difference of one layer at full image resolution.

    ``channel_indices`` maps each row of ``values`` to the layer's original
    channel, which matters once channels have been dropped.
    """

    layer_index: int
    values: np.ndarray
    channel_indices: tuple = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise ShapeError(f"feature delta must be (C, H, W), got {values.shape}")
        if not np.isfinite(values).all():
            raise ValidationError("feature delta contains non-finite values")
        object.__setattr__(self, "values", values)
        idx = self.channel_indices
        idx = tuple(range(values.shape[0])) if idx is None else tuple(int(i) for i in idx)
        if len(idx) != values.shape[0]:
            raise ShapeError("channel_indices length differs from channel count")
        object.__setattr__(self, "channel_indices", idx)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class HyperVector:
    values: np.ndarray
    provenance: tuple
    nodata_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values.shape[0] < 1:
            raise ValidationError("hypervector needs at least one channel")
        if len(self.provenance) != self.values.shape[0]:
            raise ShapeError("provenance length differs from channel count")

    @property
    def dimension(self) -> int:
        return self.values.shape[0]


def feature_deltas(ext: FeatureExtractor, before: RasterImage, after: RasterImage, L) -> list:
    """``delta_l = F_l(before) - F_l(after)`` for every l in L."""
    if before.shape != after.shape:
        raise ShapeError(f"image shapes differ: {before.shape} vs {after.shape}")
    L = validate_layers(ext, L)
    fb = extract_features(ext, before, L)
    fa = extract_features(ext, after, L)
    return [FeatureDelta(l, b - a) for l, b, a in zip(L, fb, fa)]


def _initial_centroids(x, k, offset):
    n = x.shape[0]
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < k:
        raise ClusteringDegeneracyError(f"{n_distinct} distinct pixels for {k} clusters")
    stride = max(1, n // k)
    order = np.concatenate([np.arange(offset % stride, n, stride), np.arange(n)])
    chosen = []
    for i in order:
        row = x[i]
        if not any(np.array_equal(row, c) for c in chosen):
            chosen.append(row)
            if len(chosen) == k:
                break
    return np.array(chosen)


def kmeans(x: np.ndarray, k: int, offset: int = 0):
    """Lloyd's k-means on rows of ``x`` with deterministic strided initialization.

    Returns ``(labels, centroids)``. Empty clusters keep their previous centroid.
    """
    centroids = _initial_centroids(x, k, offset)
    x_sq = np.einsum("ij,ij->i", x, x)
    labels = None
    for _ in range(KMEANS_MAX_ITER):
        d = x_sq[:, None] - 2.0 * (x @ centroids.T) + np.einsum("ij,ij->i", centroids, centroids)
        labels = np.argmin(d, axis=1)
        updated = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                updated[j] = members.mean(axis=0)
        shift = np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max()
        centroids = updated
        if shift < KMEANS_TOL:
            break
    return labels, centroids


def select_features(delta: FeatureDelta, params: SelectionParams = SelectionParams()) -> FeatureDelta:
    """Keep the channels that carry the most within-cluster variance.

    Pixels are clustered in delta space; in each cluster a channel is kept if
    its variance exceeds the ``keep_percentile`` nearest-rank value of that
    cluster's channel variances, and the highest-variance channel is always
    kept. The union over clusters is returned in original channel order.
    """
    c = delta.channels
    x = delta.values.reshape(c, -1).T.astype(np.float64)
    if params.clusters_k > x.shape[0]:
        raise ClusteringDegeneracyError(
            f"{params.clusters_k} clusters requested for {x.shape[0]} pixels")
    labels, _ = kmeans(x, params.clusters_k, params.rng_seed)

    keep = np.zeros(c, dtype=bool)
    for j in range(params.clusters_k):
        members = x[labels == j]
        if not len(members):
            continue
        var = members.var(axis=0)
        keep |= var > nearest_rank(var, params.keep_percentile)
        keep[int(np.argmax(var))] = True

    idx = np.flatnonzero(keep)
    return FeatureDelta(delta.layer_index, delta.values[idx],
                        tuple(delta.channel_indices[i] for i in idx))


def build_hypervector(selected, nodata_mask=None) -> HyperVector:
    """Concatenate deltas channel-wise in ascending layer order."""
    selected = sorted(selected, key=lambda d: d.layer_index)
    if not selected:
        raise ValidationError("no feature deltas to concatenate")
    shape = selected[0].values.shape[1:]
    for d in selected:
        if d.values.shape[1:] != shape:
            raise ShapeError(f"layer {d.layer_index} has spatial shape {d.values.shape[1:]}, "
                             f"expected {shape}")
    values = np.concatenate([d.values for d in selected], axis=0)
    provenance = tuple((d.layer_index, ch) for d in selected for ch in d.channel_indices)
    return HyperVector(values, provenance, nodata_mask)


def hypervector_norm(G: HyperVector) -> ScalarMap:
    v = G.values.astype(np.float64)
    norm = np.sqrt(np.einsum("khw,khw->hw", v, v))
    if G.nodata_mask is not None:
        norm[G.nodata_mask] = 0.0
    return ScalarMap(norm, "hypervector_norm", G.nodata_mask)


def _select_with_fallback(delta, params, warnings):
    try:
        return select_features(delta, params)
    except ClusteringDegeneracyError:
        x = delta.values.reshape(delta.channels, -1).T
        k = max(1, min(params.clusters_k, np.unique(x, axis=0).shape[0]))
        logger.warning("layer %d: too few distinct pixels, clustering with k=%d",
                       delta.layer_index, k)
        warnings.append(f"clusters_reduced(L{delta.layer_index}->{k})")
        return select_features(delta, SelectionParams(k, params.keep_percentile, params.rng_seed))


def dcva_method_tag(thr: ThresholdSpec, L) -> str:
    if thr.method == "otsu":
        return "dcva_otsu"
    if thr.method == "adaptive":
        return f"dcva_ada(L={layers_label(L)})"
    return f"dcva_p{thr.percentile_p:g}"


def dcva_change_map(before: RasterImage, after: RasterImage, ext: FeatureExtractor, L,
                    sel_params: SelectionParams = SelectionParams(),
                    thr: ThresholdSpec = ThresholdSpec()):
    """Full DCVA: deltas, channel selection, hypervector norm and threshold.

    Returns ``(change_map, norm_map)``. A constant norm map (e.g. an
    identical pair) cannot be Otsu-thresholded; it yields an empty mask
    carrying a ``degenerate_otsu`` warning instead of an error.
    """
    L = validate_layers(ext, parse_layers(L))
    warnings = []
    deltas = feature_deltas(ext, before, after, L)
    selected = [_select_with_fallback(d, sel_params, warnings) for d in deltas]
    nodata = union_nodata(before.nodata_mask, after.nodata_mask)
    G = build_hypervector(selected, nodata)
    norm = hypervector_norm(G)
    tag = dcva_method_tag(thr, L)
    try:
        cmap = threshold_map(norm, thr, tag)
    except DegenerateDistributionError:
        logger.warning("hypervector norm is constant; Otsu undefined, reporting no change")
        v = norm.valid_values()
        t = float(v[0]) if v.size else 0.0
        cmap = ChangeMap(np.zeros(norm.values.shape, bool), t, tag, norm.valid_mask,
                         ("degenerate_otsu",))
    if warnings:
        cmap = ChangeMap(cmap.mask, cmap.threshold_used, cmap.method_tag, cmap.valid_mask,
                         cmap.warnings + tuple(warnings))
    return cmap, norm
