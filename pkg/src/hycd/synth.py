"""
Synthetic before/after hyperspectral scenes with exact change masks.

The ``before`` scene is a Voronoi tiling of materials, each with a smooth
random reflectance spectrum over 400-2505 nm, plus Gaussian noise. The
``after`` scene applies the change blocks, a global illumination gain, an
integer (periodic) translation and independent noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ShapeError, ValidationError
from .raster import ChangeMap, RasterImage

SPECTRAL_RANGE_NM = (400.0, 2505.0)
BLOCK_MODES = ("spectral-shift", "material-swap")
_SPLINE_KNOTS = 8


@dataclass(frozen=True)
class ChangeBlock:
    x: int
    y: int
    w: int
    h: int
    mode: str = "material-swap"
    amplitude: float = 0.1  # peak of the added spectrum, spectral-shift only

    def __post_init__(self):
        if self.mode not in BLOCK_MODES:
            raise ValidationError(f"unknown change mode {self.mode!r}")
        if self.w < 1 or self.h < 1:
            raise ValidationError("change blocks must have positive size")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    bands: int = 32
    n_materials: int = 5
    change_blocks: tuple = ()
    noise_sigma: float = 0.01
    illumination_gain: float = 1.0
    shift_px: tuple = (0, 0)
    seed: int = 0
    n_cells: int = 24

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ChangeBlock) else ChangeBlock(**b)
                       for b in self.change_blocks)
        object.__setattr__(self, "change_blocks", blocks)
        object.__setattr__(self, "shift_px", tuple(int(s) for s in self.shift_px))
        if min(self.width, self.height, self.bands, self.n_materials, self.n_cells) < 1:
            raise ValidationError("scene dimensions and counts must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not self.illumination_gain > 0:
            raise ValidationError("illumination_gain must be > 0")
        if len(self.shift_px) != 2:
            raise ValidationError("shift_px is (dx, dy)")
        for b in blocks:
            if b.x < 0 or b.y < 0 or b.x + b.w > self.width or b.y + b.h > self.height:
                raise ValidationError(f"change block {b} exceeds the scene")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["change_blocks"] = [asdict(b) for b in self.change_blocks]
        d["shift_px"] = list(self.shift_px)
        return d


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    iou: float
    changed_percent: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def wavelengths(bands: int) -> np.ndarray:
    return np.linspace(*SPECTRAL_RANGE_NM, bands)


def _smooth_curve(rng, wl, low, high):
    knots = np.linspace(*SPECTRAL_RANGE_NM, _SPLINE_KNOTS)
    return CubicSpline(knots, rng.uniform(low, high, _SPLINE_KNOTS))(wl)


def _material_spectra(rng, n, wl):
    return np.stack([np.clip(_smooth_curve(rng, wl, 0.05, 0.6), 0.01, 1.0) for _ in range(n)])


def _voronoi_labels(rng, spec):
    cx = rng.uniform(0, spec.width, spec.n_cells)
    cy = rng.uniform(0, spec.height, spec.n_cells)
    material = rng.integers(0, spec.n_materials, spec.n_cells)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    d = (xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2
    return material[np.argmin(d, axis=0)]


def truth_mask(spec: SceneSpec) -> np.ndarray:
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for b in spec.change_blocks:
        mask[b.y:b.y + b.h, b.x:b.x + b.w] = True
    return mask


def generate_pair(spec: SceneSpec):
    """Return ``(before, after, truth)``; identical seeds give bit-identical output.

    Random draws happen in a fixed order independent of the noise level, so
    changing ``noise_sigma`` alone does not change the scene layout.
    """
    rng = np.random.default_rng(spec.seed)
    wl = wavelengths(spec.bands)
    spectra = _material_spectra(rng, spec.n_materials, wl)
    swap_spectrum = _material_spectra(rng, 1, wl)[0]
    labels = _voronoi_labels(rng, spec)
    offsets = []
    for b in spec.change_blocks:
        curve = _smooth_curve(rng, wl, -1.0, 1.0)
        peak = np.abs(curve).max()
        offsets.append(b.amplitude * curve / peak if peak > 0 else curve)
    noise_b = rng.standard_normal((spec.bands, spec.height, spec.width))
    noise_a = rng.standard_normal((spec.bands, spec.height, spec.width))

    clean = np.moveaxis(spectra[labels], -1, 0)
    before = clean + spec.noise_sigma * noise_b

    changed = before.copy()
    for b, offset in zip(spec.change_blocks, offsets):
        window = (slice(None), slice(b.y, b.y + b.h), slice(b.x, b.x + b.w))
        if b.mode == "spectral-shift":
            changed[window] += offset[:, None, None]
        else:
            changed[window] = swap_spectrum[:, None, None]
    after = spec.illumination_gain * changed
    dx, dy = spec.shift_px
    if dx or dy:
        after = np.roll(after, (dy, dx), axis=(1, 2))
    after = after + spec.noise_sigma * noise_a

    truth = ChangeMap(truth_mask(spec), 0.5, "truth")
    return RasterImage(before, wl), RasterImage(after, wl), truth


def calibrate_noise(spec: SceneSpec, contrast_sigmas: float) -> SceneSpec:
    """Copy of ``spec`` whose noise makes the block change ``contrast_sigmas`` noise sigmas.

    Contrast is the mean absolute per-band difference inside the change
    blocks of the noise-free pair.
    """
    if not spec.change_blocks:
        raise ValidationError("contrast is undefined without change blocks")
    quiet = replace(spec, noise_sigma=0.0, illumination_gain=1.0, shift_px=(0, 0))
    before, after, truth = generate_pair(quiet)
    diff = np.abs(after.data - before.data.astype(np.float64))[:, truth.mask]
    return replace(spec, noise_sigma=float(diff.mean() / contrast_sigmas))


def evaluate(pred: ChangeMap, truth: ChangeMap) -> DetectionMetrics:
    """Pixelwise confusion metrics over pixels valid in both maps.

    Conventions for empty denominators: precision is 1 when nothing is
    predicted, recall is 1 when nothing is true, IoU is 1 when both are
    empty and F1 is 0 when precision + recall is 0.
    """
    if pred.mask.shape != truth.mask.shape:
        raise ShapeError(f"mask shapes differ: {pred.mask.shape} vs {truth.mask.shape}")
    valid = pred.valid() & truth.valid()
    p = pred.mask & valid
    t = truth.mask & valid
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    tn = int(valid.sum()) - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    n_valid = int(valid.sum())
    changed = 100.0 * (tp + fp) / n_valid if n_valid else 0.0
    return DetectionMetrics(precision, recall, f1, iou, changed, tp, fp, fn, tn)


def load_spec(path) -> SceneSpec:
    with open(path) as fh:
        return SceneSpec.from_dict(json.load(fh))
