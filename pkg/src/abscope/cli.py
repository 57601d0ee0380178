"""Command-line pipeline: scenes to maps to reports.

Subcommands:

* ``exact``        closed-form maps of a scene (no sampling)
* ``simulate``     Monte Carlo acquisition producing raw tallies
* ``reconstruct``  estimates + power-sum layers from raw tallies, or
                   power-sum layers added to an existing map stack
* ``analyze``      narrowing / two-peak reports from a map stack

Every output directory gets a ``run_manifest.json`` recording the tool
version, the full parameter set, the scene hash and seed where relevant,
and wall-clock timestamps.  Data files (tallies, CSV layers) are byte
identical across reruns with the same parameters; the manifest is the one
file carrying timing.

Exit codes: 0 success, 2 input error (bad file, bad flag value),
3 pipeline precondition error (e.g. order beyond detector capability,
missing layer).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .algebra import MAX_ORDER
from .analysis import fit_two_gaussians_1d, narrowing_report
from .estimation import estimate_scan
from .mapstack import MapStack, ScanGrid
from .montecarlo import RNG_ID, DetectorModel, RawScan, simulate_scan
from .reconstruction import certify_two_emitter, error_propagate, reconstruct
from .scene import (
    SceneFormatError,
    bundled_scene_names,
    bundled_scene_path,
    load_scene,
    scan_exact,
    scene_fingerprint,
)

TWO_PEAK_HEADER = ("layer,center1_nm,center2_nm,separation_nm,"
                   "separation_se_nm,fwhm_nm,offset,residual_rms,converged")


class InputError(Exception):
    """Bad user input: exit code 2."""


class PipelineError(Exception):
    """Valid input that the pipeline cannot act on: exit code 3."""


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_scene(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    if "/" not in name and not name.endswith(".toml"):
        try:
            return bundled_scene_path(name)
        except SceneFormatError:
            pass
    raise InputError(
        f"scene {name!r} is neither a file nor a bundled scene "
        f"(bundled: {', '.join(bundled_scene_names())})")


def _load_scene_checked(name: str):
    path = _resolve_scene(name)
    try:
        scene, grid = load_scene(path)
    except SceneFormatError as exc:
        raise InputError(str(exc))
    return path, scene, grid


def _grid_from_args(args, file_grid) -> ScanGrid:
    overrides = [args.grid_origin, args.grid_pitch, args.grid_size]
    given = [o is not None for o in overrides]
    if any(given) and not all(given):
        raise InputError("grid override needs all of --grid-origin, "
                         "--grid-pitch and --grid-size")
    if all(given):
        try:
            ox, oy = (float(v) for v in args.grid_origin.split(","))
            width, height = (int(v) for v in args.grid_size.lower().split("x"))
            return ScanGrid(origin=(ox, oy), pitch=args.grid_pitch,
                            width=width, height=height)
        except ValueError as exc:
            raise InputError(f"bad grid override: {exc}")
    if file_grid is None:
        raise InputError("scene file has no [grid] section; pass "
                         "--grid-origin/--grid-pitch/--grid-size")
    return file_grid


def _resolve_threads(args) -> int:
    value = args.threads
    if value is None:
        env = os.environ.get("ABSCOPE_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise InputError(f"ABSCOPE_THREADS={env!r} is not an integer")
    if value is None:
        return 1
    if value < 1:
        raise InputError(f"thread count must be >= 1, got {value}")
    return value


def _write_run_manifest(outdir: Path, subcommand: str, parameters: dict,
                        started: str, wall_seconds: float,
                        scene_hash: str | None = None,
                        base_seed: int | None = None,
                        rng: str | None = None) -> None:
    manifest = {
        "tool": "abscope",
        "version": __version__,
        "subcommand": subcommand,
        "parameters": parameters,
        "scene_hash": scene_hash,
        "base_seed": base_seed,
        "rng": rng,
        "started_utc": started,
        "finished_utc": _utc_now(),
        "wall_seconds": wall_seconds,
    }
    (outdir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- subcommands -------------------------------------------------------


def cmd_exact(args) -> int:
    started = _utc_now()
    t0 = time.monotonic()
    path, scene, file_grid = _load_scene_checked(args.scene)
    grid = _grid_from_args(args, file_grid)
    threads = _resolve_threads(args)
    stack = scan_exact(scene, grid, max_order=args.order, threads=threads)
    outdir = Path(args.out)
    stack.save(outdir)
    _write_run_manifest(
        outdir, "exact",
        {"scene": str(path), "scene_file_sha256": _file_sha256(path),
         "grid": grid.to_json(), "order": args.order, "threads": threads},
        started, time.monotonic() - t0, scene_hash=scene_fingerprint(scene))
    print(f"wrote {len(stack.layer_names())} layers to {outdir}")
    return 0


def cmd_simulate(args) -> int:
    started = _utc_now()
    t0 = time.monotonic()
    path, scene, file_grid = _load_scene_checked(args.scene)
    grid = _grid_from_args(args, file_grid)
    threads = _resolve_threads(args)
    try:
        detector = DetectorModel.parse(args.detector)
    except ValueError as exc:
        raise InputError(str(exc))
    if args.pulses < 1:
        raise InputError(f"--pulses must be >= 1, got {args.pulses}")
    if not 1 <= args.blocks <= args.pulses:
        raise InputError(f"--blocks must lie in 1..pulses, got {args.blocks}")
    raw = simulate_scan(scene, grid, args.pulses, detector, args.seed,
                        blocks=args.blocks, threads=threads)
    outdir = Path(args.out)
    raw.save(outdir)
    _write_run_manifest(
        outdir, "simulate",
        {"scene": str(path), "scene_file_sha256": _file_sha256(path),
         "grid": grid.to_json(), "pulses": args.pulses,
         "detector": detector.describe(), "blocks": args.blocks,
         "threads": threads},
        started, time.monotonic() - t0, scene_hash=raw.scene_hash,
        base_seed=args.seed, rng=RNG_ID)
    print(f"simulated {grid.width}x{grid.height} pixels, "
          f"{args.pulses} pulses each, into {outdir}")
    return 0


def _load_stack_or_raw(directory: Path):
    if (directory / "mapstack.json").exists():
        return MapStack.load(directory), None
    if (directory / "manifest.json").exists():
        try:
            return None, RawScan.load(directory)
        except ValueError as exc:
            raise InputError(str(exc))
    raise InputError(f"{directory} holds neither a map stack nor raw tallies")


def cmd_reconstruct(args) -> int:
    started = _utc_now()
    t0 = time.monotonic()
    indir = Path(args.input)
    if not indir.is_dir():
        raise InputError(f"input directory {indir} does not exist")
    mode = args.mode.replace("-", "_")
    order = args.order
    stack, raw = _load_stack_or_raw(indir)
    if raw is not None:
        needed = order if mode == "standard" else 2
        if args.certify:
            needed = max(needed, 3)
        if raw.detector.kind == "tree" and needed > raw.detector.detectors:
            raise PipelineError(
                f"insufficient detector order: {mode} mode at order {order} "
                f"needs g up to order {needed}, but the "
                f"{raw.detector.detectors}-detector tree stops at "
                f"order {raw.detector.detectors}")
        stack = estimate_scan(raw, K=needed)
    try:
        reconstruct(stack, order, mode=mode)
        if stack.has_layer("se_intensity"):
            error_propagate(stack, order, mode=mode)
    except ValueError as exc:
        raise PipelineError(str(exc))
    if args.certify:
        if not stack.has_layer("g3"):
            raise PipelineError("cannot certify pair closure: no g3 layer")
        if not certify_two_emitter(stack):
            raise PipelineError("pair closure rejected: g3 is not "
                                "statistically compatible with zero")
    outdir = Path(args.out)
    stack.save(outdir)
    _write_run_manifest(
        outdir, "reconstruct",
        {"input": str(indir), "order": order, "mode": args.mode,
         "certify": bool(args.certify)},
        started, time.monotonic() - t0,
        scene_hash=raw.scene_hash if raw is not None else None,
        base_seed=raw.base_seed if raw is not None else None,
        rng=raw.rng_id if raw is not None else None)
    print(f"wrote {len(stack.layer_names())} layers to {outdir}")
    return 0


def _two_peak_profile(stack: MapStack, layer: str, emitter):
    values = stack.layer(layer)
    mask = stack.mask(layer)
    if emitter is not None:
        row = int(np.argmin(np.abs(stack.grid.y_coords() - emitter[1])))
    else:
        masked = np.where(mask, values, -np.inf)
        row = int(np.unravel_index(np.argmax(masked), values.shape)[0])
    x = stack.grid.x_coords()[mask[row]]
    return x, values[row][mask[row]]


def cmd_analyze(args) -> int:
    started = _utc_now()
    t0 = time.monotonic()
    indir = Path(args.input)
    if not (indir / "mapstack.json").exists():
        raise InputError(f"{indir} is not a map-stack directory")
    stack = MapStack.load(indir)
    emitter = None
    if args.emitter is not None:
        try:
            x_s, y_s = args.emitter.split(",")
            emitter = (float(x_s), float(y_s))
        except ValueError:
            raise InputError(f"--emitter expects 'x,y', got {args.emitter!r}")
    if emitter is None and args.two_peak is None:
        raise InputError("nothing to do: pass --emitter x,y and/or "
                         "--two-peak LAYER")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    reports = []

    if emitter is not None:
        orders = [1] + [k for k in range(2, MAX_ORDER + 1)
                        if stack.has_layer(f"sr{k}")]
        try:
            rows = narrowing_report(stack, emitter, orders=orders,
                                    out_path=outdir / "narrowing.csv")
        except ValueError as exc:
            raise PipelineError(str(exc))
        reports.append("narrowing.csv")
        for entry in rows:
            flag = "" if entry.converged else "  [unconverged]"
            print(f"order {entry.order}: fwhm {entry.fwhm_nm:.1f} nm, "
                  f"deviation {entry.deviation:+.2%}{flag}")

    if args.two_peak is not None:
        layer = args.two_peak
        if not stack.has_layer(layer):
            raise PipelineError(f"missing layer {layer}; stack has "
                                f"{stack.layer_names()}")
        x, values = _two_peak_profile(stack, layer, emitter)
        if len(x) < 9:
            raise PipelineError(f"profile through {layer} has only "
                                f"{len(x)} defined pixels; need 9")
        fit = fit_two_gaussians_1d(x, values)
        lines = [TWO_PEAK_HEADER,
                 f"{layer},{fit.centers[0]:.17g},{fit.centers[1]:.17g},"
                 f"{fit.separation:.17g},{fit.separation_se:.17g},"
                 f"{fit.fwhm:.17g},{fit.offset:.17g},{fit.residual_rms:.17g},"
                 f"{'true' if fit.converged else 'false'}"]
        (outdir / "two_peak.csv").write_text("\n".join(lines) + "\n")
        reports.append("two_peak.csv")
        flag = "" if fit.converged else "  [unconverged]"
        print(f"{layer}: separation {fit.separation:.1f} "
              f"+/- {fit.separation_se:.1f} nm{flag}")

    _write_run_manifest(
        outdir, "analyze",
        {"input": str(indir),
         "emitter": None if emitter is None else list(emitter),
         "two_peak": args.two_peak, "reports": reports},
        started, time.monotonic() - t0)
    return 0


# -- parser ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abscope",
        description="Super-resolution maps from photon-counting statistics "
                    "of single-photon emitters.")
    parser.add_argument("--version", action="version",
                        version=f"abscope {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p):
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: ABSCOPE_THREADS or 1)")
        p.add_argument("--out", required=True, help="output directory")

    def add_scene_grid(p):
        p.add_argument("scene",
                       help="scene file path or bundled scene name "
                            f"({', '.join(bundled_scene_names())})")
        p.add_argument("--grid-origin", default=None, metavar="X,Y",
                       help="override grid origin in nm")
        p.add_argument("--grid-pitch", type=float, default=None, metavar="NM")
        p.add_argument("--grid-size", default=None, metavar="WxH")

    p = sub.add_parser("exact", help="closed-form maps, no sampling")
    add_scene_grid(p)
    p.add_argument("--order", type=int, default=3, choices=range(2, MAX_ORDER + 1),
                   metavar="K", help="highest correlation order (default 3)")
    add_common(p)
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("simulate", help="Monte Carlo acquisition")
    add_scene_grid(p)
    p.add_argument("--pulses", type=lambda s: int(float(s)), required=True,
                   metavar="M", help="pulses per pixel (accepts 1e6 notation)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--detector", default="pnr",
                   help="pnr | tree:<d> | tree:<d>:<s1,...,sd> (default pnr)")
    p.add_argument("--blocks", type=int, default=100,
                   help="pulse blocks for jackknife errors (default 100)")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct",
                       help="power-sum layers from raw tallies or maps")
    p.add_argument("input", help="raw-scan or map-stack directory")
    p.add_argument("--order", type=int, default=2,
                   choices=range(2, MAX_ORDER + 1), metavar="K")
    p.add_argument("--mode", default="standard",
                   choices=["standard", "two-emitter"])
    p.add_argument("--certify", action="store_true",
                   help="require g3 compatible with zero before two-emitter "
                        "reconstruction")
    add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("analyze", help="narrowing / two-peak reports")
    p.add_argument("input", help="map-stack directory")
    p.add_argument("--emitter", default=None, metavar="X,Y",
                   help="emitter position for the narrowing report")
    p.add_argument("--two-peak", default=None, metavar="LAYER",
                   help="fit two peaks along a row of this layer")
    add_common(p)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
