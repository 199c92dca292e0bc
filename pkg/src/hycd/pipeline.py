"""
End-to-end change-detection runs driven by JSON configs.

A run loads the pair, optionally registers ``after`` onto ``before``, cuts
the AOI patch, applies one change-detection method to the patch and writes
the mask, the scalar maps and one CSV statistics row. Stages always run in
that order; thresholds therefore only ever see the AOI.

A config file looks like::

    {"before": "scene/before.bin", "after": "scene/after.bin",
     "output_prefix": "out/beirut_", "location_tag": "Beirut",
     "registration": {"enabled": true, "band_index": 30},
     "aoi": {"x0": 0, "y0": 0, "size": 512},
     "method": "dcva_ada", "layers": "preset1", "bands": [30, 20, 10, 45],
     "seed": 7}

Relative paths resolve against the directory holding the config. An
optional ``"methods"`` entry (a list of partial configs, or ``"table2"``)
expands one config into several runs sharing the same inputs.
"""

from __future__ import annotations

import csv
import glob
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

from .coregister import FlowParams, coregister_pair
from .cva import c2va_change_map
from .dcva import LAYER_PRESETS, SelectionParams, dcva_change_map, layers_label, parse_layers
from .errors import ConfigError, HycdError, StageError
from .extractor import builtin_extractor, load_extractor
from .raster import (extract_patch, read_raster, select_bands, write_mask_pgm, write_raster,
                     write_scalar_map)
from .threshold import ThresholdSpec, bimodality_coefficient

logger = logging.getLogger(__name__)

METHODS = ("c2va", "dcva_otsu", "dcva_ada")
STAGES = ("load", "register", "patch", "detect", "write")
CSV_COLUMNS = ["location_tag", "location_type", "method", "layers", "changed_percent",
               "threshold_used", "max_flow", "bimodality", "warning", "error", "elapsed_s"]
TIMING_COLUMNS = ("elapsed_s",)
TABLE_COLUMNS = ["C2VA", "DCVA Otsu", "DCVA Ada (1)", "DCVA Ada (2)", "DCVA Ada (3)"]

# the five method columns of the overview table
TABLE2_METHODS = (
    {"method": "c2va"},
    {"method": "dcva_otsu", "layers": "preset2"},
    {"method": "dcva_ada", "layers": "preset1"},
    {"method": "dcva_ada", "layers": "preset2"},
    {"method": "dcva_ada", "layers": "preset3"},
)

_TOP_KEYS = {"before", "after", "output_prefix", "location_tag", "location_type", "method",
             "methods", "registration", "aoi", "percentile", "layers", "selection",
             "threshold", "bands", "c2va_bands", "seed", "weights", "figures"}
_REG_KEYS = {"enabled", "band_index", "pyramid_levels", "window_radius",
             "iterations_per_level", "regularization_eps"}
_AOI_KEYS = {"x0", "y0", "size"}
_SEL_KEYS = {"clusters_k", "keep_percentile"}
_THR_KEYS = {"bins", "radius", "k", "statistic"}


@dataclass(frozen=True)
class RegistrationConfig:
    enabled: bool = False
    band_index: int = 0
    flow: FlowParams = FlowParams()


@dataclass(frozen=True)
class AOI:
    """Square analysis window; ``size=None`` takes the whole image."""

    x0: int = 0
    y0: int = 0
    size: Optional[int] = 512


@dataclass(frozen=True)
class PipelineConfig:
    before_path: str
    after_path: str
    output_prefix: str
    method: str = "c2va"
    location_tag: str = ""
    location_type: str = ""
    registration: RegistrationConfig = RegistrationConfig()
    aoi: AOI = AOI()
    percentile: float = 90.0
    layers: tuple = LAYER_PRESETS["preset1"]
    selection: SelectionParams = SelectionParams()
    threshold: ThresholdSpec = ThresholdSpec()
    bands: tuple = (0, 1, 2, 3)
    c2va_bands: Optional[tuple] = None
    seed: int = 0
    weights_path: Optional[str] = None
    figures: bool = False

    @property
    def slug(self) -> str:
        """File-name stem distinguishing this run from its siblings."""
        if self.method == "c2va":
            return f"c2va_p{self.percentile:g}"
        return f"{self.method}_L{'-'.join(str(l) for l in self.layers)}"

    @property
    def table_label(self) -> str:
        if self.method == "c2va":
            return "C2VA"
        if self.method == "dcva_otsu" and self.layers == LAYER_PRESETS["preset2"]:
            return "DCVA Otsu"
        if self.method == "dcva_ada":
            for i in (1, 2, 3):
                if self.layers == LAYER_PRESETS[f"preset{i}"]:
                    return f"DCVA Ada ({i})"
        name = "DCVA Otsu" if self.method == "dcva_otsu" else "DCVA Ada"
        return f"{name} (L={layers_label(self.layers)})"


@dataclass
class RunReport:
    """Outcome of one run: statistics row, artifact paths and stage timings."""

    location_tag: str
    location_type: str
    method: str
    layers: str
    table_label: str
    changed_percent: Optional[float] = None
    threshold_used: Optional[float] = None
    max_flow: Optional[float] = None
    bimodality: Optional[float] = None
    warnings: tuple = ()
    error: str = ""
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.error

    def row(self) -> dict:
        def fmt(x, spec):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else format(x, spec)

        return {
            "location_tag": self.location_tag,
            "location_type": self.location_type,
            "method": self.method,
            "layers": self.layers,
            "changed_percent": fmt(self.changed_percent, ".4f"),
            "threshold_used": fmt(self.threshold_used, ".6g"),
            "max_flow": fmt(self.max_flow, ".4f"),
            "bimodality": fmt(self.bimodality, ".4f"),
            "warning": ";".join(self.warnings),
            "error": self.error,
            "elapsed_s": f"{sum(self.timings.values()):.3f}",
        }


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


def _resolve(path, base_dir):
    if path is None:
        return None
    path = os.path.expanduser(str(path))
    return path if os.path.isabs(path) or not base_dir else os.path.join(base_dir, path)


def _int_tuple(value, name):
    if isinstance(value, str):
        value = [s for s in value.split(",") if s.strip()]
    try:
        return tuple(int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a list of integers") from exc


def config_from_dict(d: dict, base_dir: str = "") -> PipelineConfig:
    """Build a validated config; raises :class:`ConfigError` on any problem."""
    _check_keys(d, _TOP_KEYS - {"methods"}, "config")
    for key in ("before", "after", "output_prefix"):
        if not d.get(key):
            raise ConfigError(f"config needs {key!r}")
    reg = d.get("registration") or {}
    aoi = d.get("aoi") or {}
    sel = d.get("selection") or {}
    thr = d.get("threshold") or {}
    _check_keys(reg, _REG_KEYS, "registration")
    _check_keys(aoi, _AOI_KEYS, "aoi")
    _check_keys(sel, _SEL_KEYS, "selection")
    _check_keys(thr, _THR_KEYS, "threshold")

    method = d.get("method", "c2va")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {method!r}")
    seed = d.get("seed", 0)
    try:
        flow = FlowParams(**{k: v for k, v in reg.items() if k not in ("enabled", "band_index")})
        registration = RegistrationConfig(bool(reg.get("enabled", False)),
                                          int(reg.get("band_index", 0)), flow)
        size = aoi.get("size", 512)
        area = AOI(int(aoi.get("x0", 0)), int(aoi.get("y0", 0)),
                   None if size is None else int(size))
        selection = SelectionParams(int(sel.get("clusters_k", 4)),
                                    float(sel.get("keep_percentile", 90.0)), int(seed))
        threshold = ThresholdSpec(
            {"c2va": "percentile", "dcva_otsu": "otsu", "dcva_ada": "adaptive"}[method],
            float(d.get("percentile", 90.0)), int(thr.get("bins", 256)),
            int(thr.get("radius", 48)), float(thr.get("k", 3.0)),
            thr.get("statistic", "robust"))
        layers = parse_layers(d.get("layers", "preset1"))
        c2va_bands = d.get("c2va_bands")
        cfg = PipelineConfig(
            before_path=_resolve(d["before"], base_dir),
            after_path=_resolve(d["after"], base_dir),
            output_prefix=_resolve(d["output_prefix"], base_dir),
            method=method,
            location_tag=str(d.get("location_tag", "")),
            location_type=str(d.get("location_type", "")),
            registration=registration,
            aoi=area,
            percentile=threshold.percentile_p,
            layers=layers,
            selection=selection,
            threshold=threshold,
            bands=_int_tuple(d.get("bands", (0, 1, 2, 3)), "bands"),
            c2va_bands=None if c2va_bands is None else _int_tuple(c2va_bands, "c2va_bands"),
            seed=int(seed),
            weights_path=_resolve(d.get("weights"), base_dir),
            figures=bool(d.get("figures", False)),
        )
    except ConfigError:
        raise
    except (HycdError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.registration.band_index < 0:
        raise ConfigError("registration.band_index must be >= 0")
    if cfg.aoi.x0 < 0 or cfg.aoi.y0 < 0 or (cfg.aoi.size is not None and cfg.aoi.size < 1):
        raise ConfigError("aoi needs x0, y0 >= 0 and size >= 1")
    if cfg.method != "c2va" and len(cfg.bands) < 1:
        raise ConfigError("bands must name at least one band")
    return cfg


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"cannot override inside non-object {p!r}")
            node = child
        node[parts[-1]] = _parse_value(value)
    return d


def expand_methods(d: dict) -> list:
    """Split a raw config carrying a ``methods`` list into one dict per method."""
    methods = d.get("methods")
    if methods is None:
        return [d]
    if methods == "table2":
        methods = TABLE2_METHODS
    if not isinstance(methods, (list, tuple)) or not methods:
        raise ConfigError('"methods" must be a non-empty list or "table2"')
    base = {k: v for k, v in d.items() if k != "methods"}
    out = []
    for m in methods:
        if not isinstance(m, dict):
            raise ConfigError("each entry of \"methods\" must be an object")
        out.append({**base, **m})
    return out


def load_configs(path, overrides=()) -> list:
    """Read a config file and return its expanded list of :class:`PipelineConfig`."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    base_dir = os.path.dirname(os.path.abspath(path))
    return [config_from_dict(d, base_dir) for d in expand_methods(raw)]


def config_files(directory) -> list:
    files = sorted(glob.glob(os.path.join(os.fspath(directory), "*.json")))
    if not files:
        raise ConfigError(f"no *.json configs in {directory}")
    return files


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

class RegistrationCache:
    """Shares registered pairs between runs with identical inputs and settings."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries = {}

    def get(self, cfg: PipelineConfig, before, after):
        key = (cfg.before_path, cfg.after_path, cfg.registration)
        with self._lock:
            if key not in self._entries:
                self._entries[key] = coregister_pair(before, after, cfg.registration.band_index,
                                                     cfg.registration.flow)
            return self._entries[key]


class _Stage:
    def __init__(self, name, timings):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            if isinstance(exc, (HycdError, OSError, ValueError, IndexError)):
                raise StageError(self.name, exc) from exc
        return False


def _extractor(cfg: PipelineConfig):
    if cfg.weights_path:
        return load_extractor(cfg.weights_path)
    return builtin_extractor(cfg.seed, len(cfg.bands))


def _remove(paths):
    for p in paths:
        # rasters carry a JSON header next to the blob
        for q in (p, p + ".json") if p.endswith(".bin") else (p,):
            try:
                os.remove(q)
            except FileNotFoundError:
                pass


def _output_path(cfg, suffix):
    return f"{cfg.output_prefix}{cfg.slug}{suffix}"


def _ensure_parent(path):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def run(cfg: PipelineConfig, cache: Optional[RegistrationCache] = None,
        write_csv: bool = True) -> RunReport:
    """Execute load -> register -> patch -> detect -> write for one config.

    Raises :class:`StageError` naming the failing stage; files written before
    the failure are removed again.
    """
    report = RunReport(cfg.location_tag, cfg.location_type, cfg.method,
                       "" if cfg.method == "c2va" else layers_label(cfg.layers), cfg.table_label)
    timings = report.timings
    written = []
    try:
        with _Stage("load", timings):
            before = read_raster(cfg.before_path)
            after = read_raster(cfg.after_path)

        flow = None
        with _Stage("register", timings):
            if cfg.registration.enabled:
                after, flow = (cache or RegistrationCache()).get(cfg, before, after)
                report.max_flow = flow.max_displacement()

        with _Stage("patch", timings):
            size = cfg.aoi.size
            if size is None:
                b_patch, a_patch = before, after
            else:
                b_patch = extract_patch(before, cfg.aoi.x0, cfg.aoi.y0, size)
                a_patch = extract_patch(after, cfg.aoi.x0, cfg.aoi.y0, size)

        with _Stage("detect", timings):
            maps = {}
            if cfg.method == "c2va":
                if cfg.c2va_bands is not None:
                    b_patch = select_bands(b_patch, cfg.c2va_bands)
                    a_patch = select_bands(a_patch, cfg.c2va_bands)
                cmap, rho, theta = c2va_change_map(b_patch, a_patch, cfg.percentile)
                maps = {"_mag.bin": rho, "_angle.bin": theta}
                score = rho
            else:
                b_sel = select_bands(b_patch, cfg.bands)
                a_sel = select_bands(a_patch, cfg.bands)
                cmap, score = dcva_change_map(b_sel, a_sel, _extractor(cfg), cfg.layers,
                                              cfg.selection, cfg.threshold)
                maps = {"_norm.bin": score}
            report.changed_percent = round(cmap.changed_percent, 4)
            report.threshold_used = cmap.threshold_used
            report.bimodality = bimodality_coefficient(score)
            report.warnings = cmap.warnings

        with _Stage("write", timings):
            mask_path = _output_path(cfg, "_mask.pgm")
            _ensure_parent(mask_path)
            written.append(mask_path)
            write_mask_pgm(cmap, mask_path)
            report.artifacts["mask"] = mask_path
            for suffix, smap in maps.items():
                p = _output_path(cfg, suffix)
                written.append(p)
                write_scalar_map(smap, p)
                report.artifacts[suffix[1:-4]] = p
            if flow is not None:
                p = _output_path(cfg, "_flow.bin")
                written.append(p)
                write_raster(flow.to_raster(), p)
                report.artifacts["flow"] = p
            if cfg.figures:
                from . import plotting

                p = _output_path(cfg, "_panel.png")
                written.append(p)
                plotting.plot_run_panel(b_patch, a_patch, score, cmap, p,
                                        title=f"{cfg.location_tag} {cfg.table_label}".strip())
                report.artifacts["figure"] = p
            if write_csv:
                p = _output_path(cfg, ".csv")
                written.append(p)
                write_csv_rows([report], p)
                report.artifacts["csv"] = p
    except StageError:
        _remove(written)
        raise
    logger.info("%s %s: %.4f %% changed (%s)", cfg.location_tag or "-", cfg.slug,
                report.changed_percent, ", ".join(f"{k} {v:.2f}s" for k, v in timings.items()))
    return report


def _safe_run(cfg, cache):
    try:
        return run(cfg, cache, write_csv=False)
    except StageError as exc:
        logger.error("%s %s failed: %s", cfg.location_tag or "-", cfg.slug, exc)
        return RunReport(cfg.location_tag, cfg.location_type, cfg.method,
                         "" if cfg.method == "c2va" else layers_label(cfg.layers),
                         cfg.table_label, error=str(exc))


def batch(configs, jobs: int = 1) -> list:
    """Run every config, isolating failures; reports come back in config order."""
    configs = list(configs)
    if not configs:
        raise ConfigError("batch needs at least one config")
    cache = RegistrationCache()
    if jobs <= 1:
        return [_safe_run(c, cache) for c in configs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda c: _safe_run(c, cache), configs))


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_csv_rows(reports, path) -> None:
    path = os.fspath(path)
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())


def changed_percent_table(reports) -> dict:
    """``{location: {table label: changed percent or None}}`` in first-seen order."""
    table = {}
    for r in reports:
        table.setdefault(r.location_tag, {})[r.table_label] = r.changed_percent
    return table


def write_table_csv(reports, path) -> None:
    """Locations x methods grid of changed-pixel percentages (blank on failure)."""
    table = changed_percent_table(reports)
    types = {}
    for r in reports:
        types.setdefault(r.location_tag, r.location_type)
    extra = sorted({m for row in table.values() for m in row} - set(TABLE_COLUMNS))
    columns = [c for c in TABLE_COLUMNS if any(c in row for row in table.values())] + extra
    path = os.fspath(path)
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["location", "type"] + columns)
        for loc, row in table.items():
            cells = [row.get(c) for c in columns]
            writer.writerow([loc, types[loc]] + ["" if v is None else f"{v:.4f}" for v in cells])


def table_path(csv_path) -> str:
    root, ext = os.path.splitext(os.fspath(csv_path))
    return f"{root}_table{ext or '.csv'}"


def run_batch_dir(directory, out_csv=None, jobs: int = 1, figures: bool = False,
                  overrides=()) -> list:
    """Load every ``*.json`` in ``directory``, run them and write the CSV outputs."""
    configs = []
    for path in config_files(directory):
        configs += load_configs(path, overrides)
    if figures:
        configs = [replace(c, figures=True) for c in configs]
    reports = batch(configs, jobs)
    out_csv = out_csv or os.path.join(os.fspath(directory), "batch.csv")
    write_csv_rows(reports, out_csv)
    write_table_csv(reports, table_path(out_csv))
    if figures:
        from . import plotting

        root, _ = os.path.splitext(out_csv)
        plotting.plot_changed_percent(changed_percent_table(reports), f"{root}_table.png")
    return reports


def read_csv_rows(path, drop_timing: bool = True) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if drop_timing:
        for r in rows:
            for c in TIMING_COLUMNS:
                r.pop(c, None)
    return rows


__all__ = ["AOI", "PipelineConfig", "RegistrationConfig", "RunReport", "RegistrationCache",
           "apply_overrides", "batch", "config_from_dict", "expand_methods",
           "load_configs", "run", "run_batch_dir", "write_csv_rows", "write_table_csv"]
