"""
Command-line entry point: ``hycd <subcommand> ...``.

Exit codes: 0 on success, 1 when a processing stage fails, 2 on invalid
configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace

from . import pipeline
from .coregister import FlowParams, coregister_pair
from .cva import c2va_change_map
from .dcva import SelectionParams, dcva_change_map, dcva_method_tag, parse_layers
from .errors import ConfigError, HycdError, StageError, ValidationError
from .extractor import builtin_extractor, load_extractor
from .raster import (read_mask_pgm, read_raster, select_bands, write_mask_pgm, write_raster,
                     write_scalar_map)
from .synth import calibrate_noise, evaluate, generate_pair, load_spec
from .threshold import ThresholdSpec, threshold_map

logger = logging.getLogger("hycd")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_threshold_flags(p, default_method):
    p.add_argument("--threshold", choices=("percentile", "otsu", "adaptive"),
                   default=default_method)
    p.add_argument("--p", "--percentile", dest="p", type=float, default=90.0,
                   help="percentile for --threshold percentile")
    p.add_argument("--bins", type=int, default=256, help="Otsu histogram bins")
    p.add_argument("--radius", type=int, default=48, help="adaptive window half-size")
    p.add_argument("--k", type=float, default=3.0, help="adaptive spread multiplier")
    p.add_argument("--statistic", choices=("robust", "mean"), default="robust",
                   help="adaptive window statistic")


def _params(cls, *values):
    """Build a parameter object, reporting bad flag values as config errors."""
    try:
        return cls(*values)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def _threshold_spec(args):
    return _params(ThresholdSpec, args.threshold, args.p, args.bins, args.radius, args.k,
                   args.statistic)


def build_parser():
    parser = argparse.ArgumentParser(prog="hycd", description="Hyperspectral change detection.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--figures", action="store_true", help="also render PNG panels")

    p = sub.add_parser("batch", help="run every *.json config in a directory")
    p.add_argument("--configs", required=True, metavar="DIR")
    p.add_argument("--out", help="aggregate CSV (default DIR/batch.csv)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--figures", action="store_true", help="also render PNG panels and bars")

    p = sub.add_parser("coregister", help="register AFTER onto BEFORE")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--band", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flow-out")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--window-radius", type=int, default=8)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-4)

    p = sub.add_parser("c2va", help="compressed change vector analysis")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--bands", type=_int_list, help="band subset (default: all bands)")
    _add_threshold_flags(p, "percentile")
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-mag")
    p.add_argument("--out-angle")
    p.add_argument("--figure", help="PNG with magnitude and angle maps")

    p = sub.add_parser("dcva", help="deep change vector analysis")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--bands", type=_int_list, default=[0, 1, 2, 3])
    p.add_argument("--layers", default="preset1")
    _add_threshold_flags(p, "otsu")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", help="extractor weight file (default: builtin stack)")
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--keep-percentile", type=float, default=90.0)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-norm")
    p.add_argument("--figure", help="PNG panel of inputs, norm and mask")

    p = sub.add_parser("synth", help="generate a synthetic before/after pair")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--contrast-sigmas", type=float,
                   help="set noise so the change is this many noise sigmas")

    p = sub.add_parser("eval", help="score a predicted mask against the truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    return parser


def _print_reports(reports):
    writer = csv.DictWriter(sys.stdout, fieldnames=pipeline.CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())


def cmd_run(args):
    configs = pipeline.load_configs(args.config, args.override)
    reports = []
    for cfg in configs:
        if args.figures:
            cfg = replace(cfg, figures=True)
        reports.append(pipeline.run(cfg))
    _print_reports(reports)
    return EXIT_OK


def cmd_batch(args):
    reports = pipeline.run_batch_dir(args.configs, args.out, args.jobs, args.figures,
                                     args.override)
    _print_reports(reports)
    failed = sum(not r.ok for r in reports)
    if failed:
        logger.warning("%d of %d rows failed", failed, len(reports))
    return EXIT_STAGE if failed == len(reports) else EXIT_OK


def cmd_coregister(args):
    before, after = read_raster(args.before), read_raster(args.after)
    params = _params(FlowParams, args.levels, args.window_radius, args.iterations, args.eps)
    warped, flow = coregister_pair(before, after, args.band, params)
    write_raster(warped, args.out)
    if args.flow_out:
        write_raster(flow.to_raster(), args.flow_out)
    print(f"max_flow={flow.max_displacement():.4f}")
    return EXIT_OK


def cmd_c2va(args):
    spec = _threshold_spec(args)
    before, after = read_raster(args.before), read_raster(args.after)
    if args.bands:
        before, after = select_bands(before, args.bands), select_bands(after, args.bands)
    cmap, rho, theta = c2va_change_map(before, after, args.p)
    if args.threshold != "percentile":
        cmap = threshold_map(rho, spec, f"c2va_{args.threshold}")
    write_mask_pgm(cmap, args.out_mask)
    if args.out_mag:
        write_scalar_map(rho, args.out_mag)
    if args.out_angle:
        write_scalar_map(theta, args.out_angle)
    if args.figure:
        from .plotting import plot_magnitude_angle

        plot_magnitude_angle(rho, theta, args.figure, title=cmap.method_tag)
    print(f"{cmap.method_tag} changed_percent={cmap.changed_percent:.4f} "
          f"threshold={cmap.threshold_used:.6g}")
    return EXIT_OK


def cmd_dcva(args):
    layers = parse_layers(args.layers)
    sel = _params(SelectionParams, args.clusters, args.keep_percentile, args.seed)
    thr = _threshold_spec(args)
    before, after = read_raster(args.before), read_raster(args.after)
    before, after = select_bands(before, args.bands), select_bands(after, args.bands)
    ext = load_extractor(args.weights) if args.weights else builtin_extractor(args.seed,
                                                                              len(args.bands))
    cmap, norm = dcva_change_map(before, after, ext, layers, sel, thr)
    write_mask_pgm(cmap, args.out_mask)
    if args.out_norm:
        write_scalar_map(norm, args.out_norm)
    if args.figure:
        from .plotting import plot_run_panel

        plot_run_panel(before, after, norm, cmap, args.figure, title=dcva_method_tag(thr, layers))
    warn = f" warnings={';'.join(cmap.warnings)}" if cmap.warnings else ""
    print(f"{cmap.method_tag} changed_percent={cmap.changed_percent:.4f} "
          f"threshold={cmap.threshold_used:.6g}{warn}")
    return EXIT_OK


def cmd_synth(args):
    try:
        spec = load_spec(args.spec)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad scene spec {args.spec}: {exc}") from exc
    if args.contrast_sigmas:
        spec = calibrate_noise(spec, args.contrast_sigmas)
    before, after, truth = generate_pair(spec)
    prefix = args.out_prefix
    write_raster(before, prefix + "before.bin")
    write_raster(after, prefix + "after.bin")
    write_mask_pgm(truth, prefix + "truth.pgm")
    print(f"wrote {prefix}before.bin {prefix}after.bin {prefix}truth.pgm "
          f"(noise_sigma={spec.noise_sigma:.6g})")
    return EXIT_OK


def cmd_eval(args):
    m = evaluate(read_mask_pgm(args.pred), read_mask_pgm(args.truth))
    row = m.as_dict()
    if args.out:
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            writer.writeheader()
            writer.writerow(row)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in row.items()))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "batch": cmd_batch, "coregister": cmd_coregister,
            "c2va": cmd_c2va, "dcva": cmd_dcva, "synth": cmd_synth, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (HycdError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
