"""
Raster data model and file I/O.

Images are held as ``(bands, height, width)`` float32 arrays, which is the
band-sequential order used on disk: pixel ``(x, y)`` of band ``k`` lives at
flat index ``k*W*H + y*W + x``.

On-disk raster format::

    <name>.bin        raw little-endian float32, band-sequential, row-major
    <name>.bin.json   {"width", "height", "bands", "dtype": "f32",
                       "byte_order": "little", "wavelengths_nm"?, "nodata_indices"?}

``nodata_indices`` lists flat pixel indices (``y*W + x``) flagged as nodata.
Values stored at nodata pixels are not validated.

Masks are written as binary PGM (P5, maxval 255): 255 = change, 0 = no change.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BoundsError, FormatError, ShapeError, SizeError, ValidationError

# PRISMA hyperspectral sensor layout; descriptive only, never enforced.
PRISMA_VNIR_BANDS = 66
PRISMA_SWIR_BANDS = 174
PRISMA_TOTAL_BANDS = PRISMA_VNIR_BANDS + PRISMA_SWIR_BANDS
PRISMA_VNIR_RANGE_NM = (400.0, 1010.0)
PRISMA_SWIR_RANGE_NM = (920.0, 2505.0)

SCALAR_TAGS = ("magnitude", "angle_radians", "hypervector_norm")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _check_mask(mask, shape, name):
    if mask is None:
        return None
    mask = np.array(mask, dtype=bool, copy=True)
    if mask.shape != shape:
        raise ShapeError(f"{name} has shape {mask.shape}, expected {shape}")
    if not mask.any():
        return None
    return _frozen(mask)


@dataclass(frozen=True, eq=False)
class RasterImage:
    """A B-band float32 image cube.

    Attributes:
        data: array of shape (bands, height, width), float32.
        wavelengths_nm: optional band centre wavelengths, strictly increasing.
        nodata_mask: optional (height, width) boolean array, True = nodata.
    """

    data: np.ndarray
    wavelengths_nm: Optional[tuple] = None
    nodata_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"raster data must be (bands, height, width), got {data.shape}")
        object.__setattr__(self, "data", _frozen(data))
        nodata = _check_mask(self.nodata_mask, data.shape[1:], "nodata_mask")
        object.__setattr__(self, "nodata_mask", nodata)

        if self.wavelengths_nm is not None:
            wl = tuple(float(w) for w in self.wavelengths_nm)
            if len(wl) != data.shape[0]:
                raise ValidationError(
                    f"{len(wl)} wavelengths given for {data.shape[0]} bands")
            if any(b <= a for a, b in zip(wl, wl[1:])):
                raise ValidationError("wavelengths_nm must be strictly increasing")
            object.__setattr__(self, "wavelengths_nm", wl)

        bad = ~np.isfinite(data)
        if nodata is not None:
            bad &= ~nodata[np.newaxis]
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"non-finite value at flat index {idx}")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def valid_mask(self) -> np.ndarray:
        if self.nodata_mask is None:
            return np.ones((self.height, self.width), dtype=bool)
        return ~self.nodata_mask

    def band(self, k: int) -> "RasterImage":
        return select_bands(self, [k])


@dataclass(frozen=True, eq=False)
class ScalarMap:
    """One float32 value per pixel: a C2VA magnitude or angle, or a hypervector norm."""

    values: np.ndarray
    tag: str
    nodata_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.tag not in SCALAR_TAGS:
            raise ValidationError(f"unknown scalar map tag {self.tag!r}")
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim != 2:
            raise ShapeError(f"scalar map must be 2-D, got {values.shape}")
        object.__setattr__(self, "values", _frozen(values))
        nodata = _check_mask(self.nodata_mask, values.shape, "nodata_mask")
        object.__setattr__(self, "nodata_mask", nodata)

        v = values[self.valid_mask]
        if not np.isfinite(v).all():
            raise ValidationError("scalar map has non-finite valid values")
        if self.tag == "angle_radians":
            if v.size and (v.min() < 0 or v.max() > np.float32(np.pi)):
                raise ValidationError("angles must lie in [0, pi]")
        elif v.size and v.min() < 0:
            raise ValidationError(f"{self.tag} values must be non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        if self.nodata_mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return ~self.nodata_mask

    def valid_values(self) -> np.ndarray:
        """Valid pixel values as a flat array in row-major order."""
        if self.nodata_mask is None:
            return self.values.ravel()
        return self.values[~self.nodata_mask]


@dataclass(frozen=True, eq=False)
class ChangeMap:
    """Binary change mask with the provenance of the threshold that produced it.

    Pixels outside ``valid_mask`` are always reported as no change and are left
    out of ``changed_percent``.
    """

    mask: np.ndarray
    threshold_used: float
    method_tag: str
    valid_mask: Optional[np.ndarray] = None
    warnings: tuple = field(default=())

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool, copy=True)
        if mask.ndim != 2:
            raise ShapeError(f"change mask must be 2-D, got {mask.shape}")
        if not np.isfinite(self.threshold_used):
            raise ValidationError("threshold_used must be finite")
        object.__setattr__(self, "threshold_used", float(self.threshold_used))
        if self.valid_mask is not None:
            valid = np.array(self.valid_mask, dtype=bool, copy=True)
            if valid.shape != mask.shape:
                raise ShapeError("valid_mask shape differs from mask")
            mask &= valid
            object.__setattr__(self, "valid_mask", None if valid.all() else _frozen(valid))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def valid(self) -> np.ndarray:
        if self.valid_mask is None:
            return np.ones(self.mask.shape, dtype=bool)
        return self.valid_mask

    @property
    def n_valid(self) -> int:
        return int(self.valid().sum())

    @property
    def changed_percent(self) -> float:
        n = self.n_valid
        return 100.0 * int(self.mask.sum()) / n if n else 0.0


# ---------------------------------------------------------------------------
# raster files
# ---------------------------------------------------------------------------

def header_path(path) -> str:
    return os.fspath(path) + ".json"


def read_raster(path) -> RasterImage:
    """Read a ``.bin`` raster and its ``.bin.json`` sidecar, bit-exactly."""
    path = os.fspath(path)
    try:
        with open(header_path(path)) as fh:
            header = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"missing raster header {header_path(path)}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"garbled raster header {header_path(path)}: {exc}") from exc

    try:
        width, height, bands = (int(header[k]) for k in ("width", "height", "bands"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"raster header lacks width/height/bands: {exc}") from exc
    if header.get("dtype", "f32") != "f32" or header.get("byte_order", "little") != "little":
        raise FormatError("only little-endian f32 rasters are supported")
    if min(width, height, bands) < 1:
        raise FormatError("raster dimensions must be positive")

    with open(path, "rb") as fh:
        raw = fh.read()
    expected = width * height * bands * 4
    if len(raw) != expected:
        raise SizeError(f"{path}: {len(raw)} bytes on disk, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(bands, height, width)

    nodata = None
    if header.get("nodata_indices"):
        nodata = np.zeros(width * height, dtype=bool)
        idx = np.asarray(header["nodata_indices"], dtype=np.int64)
        if idx.min() < 0 or idx.max() >= width * height:
            raise FormatError("nodata index out of range")
        nodata[idx] = True
        nodata = nodata.reshape(height, width)

    return RasterImage(data, header.get("wavelengths_nm"), nodata)


def write_raster(img: RasterImage, path) -> None:
    path = os.fspath(path)
    header = {
        "width": img.width,
        "height": img.height,
        "bands": img.bands,
        "dtype": "f32",
        "byte_order": "little",
    }
    if img.wavelengths_nm is not None:
        header["wavelengths_nm"] = list(img.wavelengths_nm)
    if img.nodata_mask is not None:
        header["nodata_indices"] = np.flatnonzero(img.nodata_mask).tolist()
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(img.data.astype("<f4", copy=False).tobytes())
    with open(header_path(path), "w") as fh:
        json.dump(header, fh)
        fh.write("\n")


def scalar_map_to_raster(smap: ScalarMap) -> RasterImage:
    return RasterImage(smap.values, nodata_mask=smap.nodata_mask)


def write_scalar_map(smap: ScalarMap, path) -> None:
    write_raster(scalar_map_to_raster(smap), path)


def read_scalar_map(path, tag: str) -> ScalarMap:
    img = read_raster(path)
    if img.bands != 1:
        raise FormatError(f"{path}: scalar maps are single-band, found {img.bands}")
    return ScalarMap(img.data[0], tag, img.nodata_mask)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def write_mask_pgm(cmap: ChangeMap, path) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    payload = np.where(cmap.mask, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (cmap.width, cmap.height))
        fh.write(payload.tobytes())


def read_mask_pgm(path, method_tag: str = "pgm") -> ChangeMap:
    """Read a P5 mask; any nonzero sample counts as change."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    payload = raw[pos + 1:]
    if len(payload) != width * height:
        raise SizeError(f"{path}: {len(payload)} payload bytes, expected {width * height}")
    mask = np.frombuffer(payload, dtype=np.uint8).reshape(height, width) > 0
    return ChangeMap(mask, 0.5, method_tag)


# ---------------------------------------------------------------------------
# sub-setting
# ---------------------------------------------------------------------------

def extract_patch(img: RasterImage, x0: int, y0: int, size: int) -> RasterImage:
    """Copy the ``size`` x ``size`` window whose top-left corner is (x0, y0)."""
    if size < 1 or x0 < 0 or y0 < 0 or x0 + size > img.width or y0 + size > img.height:
        raise BoundsError(
            f"patch x0={x0} y0={y0} size={size} exceeds {img.width}x{img.height} image")
    data = img.data[:, y0:y0 + size, x0:x0 + size]
    nodata = None
    if img.nodata_mask is not None:
        nodata = img.nodata_mask[y0:y0 + size, x0:x0 + size]
    return RasterImage(data, img.wavelengths_nm, nodata)


def select_bands(img: RasterImage, indices: Sequence[int]) -> RasterImage:
    indices = [int(i) for i in indices]
    if not indices:
        raise BoundsError("at least one band must be selected")
    for i in indices:
        if not 0 <= i < img.bands:
            raise BoundsError(f"band index {i} out of range for {img.bands} bands")
    wl = None
    if img.wavelengths_nm is not None and indices == sorted(set(indices)):
        wl = [img.wavelengths_nm[i] for i in indices]
    return RasterImage(img.data[indices], wl, img.nodata_mask)


def nearest_band(img: RasterImage, wavelength_nm: float) -> int:
    """Index of the band whose centre wavelength is closest to ``wavelength_nm``."""
    if img.wavelengths_nm is None:
        raise ValidationError("image carries no wavelength metadata")
    wl = np.asarray(img.wavelengths_nm)
    return int(np.argmin(np.abs(wl - wavelength_nm)))


def union_nodata(*masks):
    """OR together optional nodata masks; None when none are set."""
    out = None
    for m in masks:
        if m is None:
            continue
        out = m.copy() if out is None else out | m
    return out
