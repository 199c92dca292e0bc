"""
Fixed-weight convolutional feature extractor.

A plain feed-forward stack of 3x3 convolutions (optionally followed by a
rectifier), standalone rectifiers and 2x2 average downsampling, evaluated
with numpy. Layers are numbered from 1, so ``activations[l]`` is the output
of layer ``l``.

Weight files follow the raster convention: ``<name>.bin`` holds the
little-endian float32 blob and ``<name>.bin.json`` describes the layers::

    {"input_bands": 4,
     "layers": [{"op": "conv3x3", "in": 4, "out": 16, "relu": true},
                {"op": "downsample2x"}, {"op": "relu"}, ...]}

Each conv layer contributes ``out*in*9`` weights (out, in, ky, kx order)
followed by ``out`` biases, in layer order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._resample import box_downsample, upsample_bilinear
from .errors import FormatError, PaddingError, ShapeError, SizeError, ValidationError
from .raster import RasterImage, header_path

OPS = ("conv3x3", "downsample2x", "relu")
BUILTIN_DEPTH = 24
BUILTIN_DOWNSAMPLE_AT = (6, 12, 18)
BUILTIN_WIDTHS = (16, 32, 64, 128)


@dataclass(frozen=True, eq=False)
class Layer:
    op: str
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    relu: bool = False

    def __post_init__(self):
        if self.op not in OPS:
            raise ValidationError(f"unknown layer op {self.op!r}")
        if self.op != "conv3x3":
            return
        w = np.array(self.weights, dtype=np.float32, copy=True)
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise ShapeError(f"conv weights must be (out, in, 3, 3), got {w.shape}")
        b = np.zeros(w.shape[0], np.float32) if self.bias is None else np.array(self.bias, np.float32)
        if b.shape != (w.shape[0],):
            raise ShapeError("conv bias length must equal output channels")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("conv parameters must be finite")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self):
        return self.weights.shape[1] if self.op == "conv3x3" else None

    @property
    def out_channels(self):
        return self.weights.shape[0] if self.op == "conv3x3" else None


def conv3x3(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 3x3 cross-correlation of a (C, H, W) array."""
    c, h, w = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, h * w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = p[:, dy:dy + h, dx:dx + w].reshape(c, -1)
    out = weights.reshape(weights.shape[0], -1) @ cols.reshape(c * 9, -1)
    out += bias[:, None]
    return out.reshape(-1, h, w)


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    layers: tuple
    input_bands: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if self.input_bands < 1:
            raise ValidationError("input_bands must be >= 1")
        ch = self.input_bands
        for i, layer in enumerate(layers, start=1):
            if layer.op == "conv3x3":
                if layer.in_channels != ch:
                    raise ShapeError(f"layer {i} expects {layer.in_channels} channels, gets {ch}")
                ch = layer.out_channels

    @property
    def depth(self) -> int:
        return len(self.layers)

    def channels_at(self, l: int) -> int:
        ch = self.input_bands
        for layer in self.layers[:l]:
            if layer.op == "conv3x3":
                ch = layer.out_channels
        return ch

    def downsample_factor(self, l: int) -> int:
        return 2 ** sum(layer.op == "downsample2x" for layer in self.layers[:l])

    def conv_layer_indices(self):
        return [i for i, layer in enumerate(self.layers, start=1) if layer.op == "conv3x3"]

    def forward(self, x: np.ndarray, capture: Sequence[int]) -> dict:
        """Run layers 1..max(capture) on a (C, H, W) array; return {l: activation}."""
        x = np.asarray(x, dtype=np.float32)
        capture = set(capture)
        out = {}
        for i, layer in enumerate(self.layers[:max(capture)], start=1):
            if layer.op == "conv3x3":
                x = conv3x3(x, layer.weights, layer.bias)
                if layer.relu:
                    x = np.maximum(x, 0)
            elif layer.op == "relu":
                x = np.maximum(x, 0)
            else:
                x = box_downsample(x)
            if i in capture:
                out[i] = x
        return out


# unit-L2 binomial profile; gives every kernel a low-pass component
_SMOOTH_PROFILE = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 6.0


def builtin_kernels(rng, out: int, ch: int) -> np.ndarray:
    """Seeded (out, ch, 3, 3) kernels with expected energy 1/ch per (out, ch) pair.

    Half of the energy is a random channel mix applied through a smooth
    binomial profile, half is i.i.d. normal noise scaled by 1/sqrt(fan_in).
    Purely i.i.d. kernels never average out pixel noise, so features of a
    random stack are as noisy as the input itself.
    """
    mix = rng.standard_normal((out, ch)) / np.sqrt(ch)
    free = rng.standard_normal((out, ch, 3, 3)) / np.sqrt(ch * 9)
    return (mix[:, :, None, None] * _SMOOTH_PROFILE + free) / np.sqrt(2.0)


def builtin_extractor(seed: int, input_bands: int = 4) -> FeatureExtractor:
    """Deterministic 24-layer fixed-weight stack.

    Layers 6, 12 and 18 halve the resolution; every other layer is a 3x3
    convolution with a rectifier. Widths grow 16 -> 32 -> 64 -> 128 after each
    downsample. Kernels come from :func:`builtin_kernels`, biases are zero.
    """
    if input_bands < 1:
        raise ValidationError("input_bands must be >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    ch = input_bands
    stage = 0
    for i in range(1, BUILTIN_DEPTH + 1):
        if i in BUILTIN_DOWNSAMPLE_AT:
            layers.append(Layer("downsample2x"))
            stage += 1
            continue
        out = BUILTIN_WIDTHS[stage]
        w = builtin_kernels(rng, out, ch)
        layers.append(Layer("conv3x3", w.astype(np.float32), np.zeros(out, np.float32), relu=True))
        ch = out
    return FeatureExtractor(tuple(layers), input_bands)


def extract_features(ext: FeatureExtractor, img: RasterImage, L: Sequence[int]) -> list:
    """Activations at each layer of ``L``, bilinearly upsampled to image size.

    Returns a list of (C_l, H, W) float32 arrays in the order of ``L``.
    Nodata pixels are fed to the network as zeros.
    """
    L = validate_layers(ext, L)
    if img.bands != ext.input_bands:
        raise ShapeError(f"extractor takes {ext.input_bands} bands, image has {img.bands}")
    factor = ext.downsample_factor(max(L))
    if img.height % factor or img.width % factor:
        raise PaddingError(
            f"{img.width}x{img.height} image is not divisible by {factor}; pad it first")
    x = img.data
    if img.nodata_mask is not None:
        x = np.where(img.nodata_mask[None], np.float32(0), x)
    acts = ext.forward(x, L)
    shape = (img.height, img.width)
    return [upsample_bilinear(acts[l], shape).astype(np.float32) for l in L]


def validate_layers(ext: FeatureExtractor, L) -> tuple:
    L = tuple(int(l) for l in L)
    if not L:
        raise ValidationError("layer selection must not be empty")
    if any(b <= a for a, b in zip(L, L[1:])):
        raise ValidationError(f"layer selection must be strictly ascending: {L}")
    if L[0] < 1 or L[-1] > ext.depth:
        raise ValidationError(f"layer indices must lie in [1, {ext.depth}]: {L}")
    return L


def save_extractor(ext: FeatureExtractor, path) -> None:
    path = os.fspath(path)
    desc = []
    blobs = []
    for layer in ext.layers:
        if layer.op == "conv3x3":
            desc.append({"op": "conv3x3", "in": int(layer.in_channels),
                         "out": int(layer.out_channels), "relu": bool(layer.relu)})
            blobs += [layer.weights.astype("<f4").tobytes(), layer.bias.astype("<f4").tobytes()]
        else:
            desc.append({"op": layer.op})
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))
    with open(header_path(path), "w") as fh:
        json.dump({"input_bands": ext.input_bands, "dtype": "f32", "byte_order": "little",
                   "layers": desc}, fh)
        fh.write("\n")


def load_extractor(path) -> FeatureExtractor:
    path = os.fspath(path)
    try:
        with open(header_path(path)) as fh:
            header = json.load(fh)
        desc = header["layers"]
        input_bands = int(header["input_bands"])
    except FileNotFoundError as exc:
        raise FormatError(f"missing weight header {header_path(path)}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"garbled weight header {header_path(path)}: {exc}") from exc
    with open(path, "rb") as fh:
        blob = np.frombuffer(fh.read(), dtype="<f4")

    layers = []
    pos = 0
    for d in desc:
        op = d.get("op")
        if op != "conv3x3":
            layers.append(Layer(op))
            continue
        n_in, n_out = int(d["in"]), int(d["out"])
        n_w = n_out * n_in * 9
        if pos + n_w + n_out > blob.size:
            raise SizeError(f"{path}: weight blob too short for layer {len(layers) + 1}")
        w = blob[pos:pos + n_w].reshape(n_out, n_in, 3, 3)
        b = blob[pos + n_w:pos + n_w + n_out]
        pos += n_w + n_out
        layers.append(Layer("conv3x3", w, b, relu=bool(d.get("relu", False))))
    if pos != blob.size:
        raise SizeError(f"{path}: {blob.size - pos} trailing weights")
    return FeatureExtractor(tuple(layers), input_bands)
