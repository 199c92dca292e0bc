"""Hyperspectral change detection: coregistration, C2VA and DCVA with synthetic benchmarks."""

from .coregister import FlowField, FlowParams, coregister_pair
from .cva import ReferenceVector, c2va_change_map, change_magnitude, phase_angle
from .dcva import SelectionParams, dcva_change_map
from .errors import HycdError, StageError
from .extractor import FeatureExtractor, builtin_extractor
from .raster import ChangeMap, RasterImage, ScalarMap, read_raster, write_raster
from .synth import SceneSpec, ChangeBlock, evaluate, generate_pair
from .threshold import ThresholdSpec, threshold_map

__version__ = "0.1.0"
