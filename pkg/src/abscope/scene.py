"""Emitter scenes and the exact (infinite-statistics) scan.

A scene is a set of point emitters under one Gaussian detection profile
plus a uniform Poisson background rate.  Each emitter contributes at most
one photon per excitation pulse, with probability

    p_i(x, y) = peak_probability * exp(-r_i^2 / (2 sigma^2)),

where r_i is the distance from the scan point to emitter i and sigma is
the detection-profile width.  Scenes are described in TOML files; see
``load_scene`` for the schema.

``scan_exact`` composes the closed-form photon statistics over a scan
grid: factorial moments of the per-pulse count, normalized correlations
g_k, and the background-free power sums whose k-th order map narrows by
sqrt(k) relative to the intensity image.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .algebra import (
    MAX_ORDER,
    DarkPixelError,
    evaluate_power_sum,
    factorial_moments_with_background,
    g_from_moments,
    power_sum_expansion,
)
from .mapstack import MapStack, ScanGrid

__all__ = [
    "FWHM_TO_SIGMA",
    "Emitter",
    "PSFModel",
    "Scene",
    "SceneFormatError",
    "detection_probability",
    "pixel_probabilities",
    "load_scene",
    "bundled_scene_path",
    "bundled_scene_names",
    "scene_fingerprint",
    "scan_exact",
]

# FWHM of a Gaussian = 2*sqrt(2*ln 2) * sigma.
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class SceneFormatError(ValueError):
    """A scene file is syntactically or semantically malformed."""


@dataclass(frozen=True)
class Emitter:
    """Point emitter at (x_nm, y_nm) with on-axis detection probability
    ``peak_probability`` per pulse."""

    x_nm: float
    y_nm: float
    peak_probability: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.peak_probability <= 1.0:
            raise ValueError(
                f"peak_probability must lie in [0, 1], got {self.peak_probability}")


@dataclass(frozen=True)
class PSFModel:
    """Isotropic Gaussian detection profile, parameterized by its FWHM."""

    fwhm_nm: float

    def __post_init__(self) -> None:
        if self.fwhm_nm <= 0:
            raise ValueError(f"fwhm_nm must be > 0, got {self.fwhm_nm}")

    @property
    def sigma_nm(self) -> float:
        return self.fwhm_nm * FWHM_TO_SIGMA


@dataclass(frozen=True)
class Scene:
    emitters: tuple[Emitter, ...]
    psf: PSFModel
    background_mean: float = 0.0

    def __post_init__(self) -> None:
        if self.background_mean < 0:
            raise ValueError(
                f"background_mean must be >= 0, got {self.background_mean}")


def detection_probability(emitter: Emitter, psf: PSFModel,
                          point: tuple[float, float]) -> float:
    """Per-pulse detection probability of one emitter at a scan point."""
    dx = point[0] - emitter.x_nm
    dy = point[1] - emitter.y_nm
    sigma = psf.sigma_nm
    return emitter.peak_probability * math.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


def pixel_probabilities(scene: Scene,
                        point: tuple[float, float]) -> tuple[list[float], float]:
    """All per-emitter detection probabilities at a scan point, plus the
    background mean."""
    probs = [detection_probability(e, scene.psf, point) for e in scene.emitters]
    return probs, scene.background_mean


# -- scene files -------------------------------------------------------
#
# Schema:
#
#   [psf]
#   fwhm_nm = 500.0                # required, > 0
#
#   [background]                   # optional, default 0
#   mean_per_pulse = 0.003
#
#   [[emitter]]                    # zero or more
#   x_nm = -135.0
#   y_nm = 0.0
#   peak_probability = 0.1
#
#   [grid]                         # optional; commands may supply their own
#   origin = [-700.0, -200.0]      # (x, y) of pixel (0, 0), nm
#   pitch_nm = 10.0
#   width = 141
#   height = 41


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise SceneFormatError(f"{where}: missing required field '{key}'")
    return table[key]


def _as_float(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneFormatError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SceneFormatError(f"{where}: expected an integer, got {value!r}")
    return value


def load_scene(path) -> tuple[Scene, ScanGrid | None]:
    """Parse a TOML scene file.

    Returns the scene and, if the file carries a [grid] section, the scan
    grid.  Raises SceneFormatError naming the offending field; TOML syntax
    errors are re-raised as SceneFormatError with the parser's line/column
    message.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise SceneFormatError(f"scene file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise SceneFormatError(f"{path}: {exc}")

    known = {"psf", "background", "emitter", "grid"}
    for key in data:
        if key not in known:
            raise SceneFormatError(f"{path}: unknown section '{key}'")

    psf_table = data.get("psf")
    if not isinstance(psf_table, dict):
        raise SceneFormatError(f"{path}: missing required section [psf]")
    fwhm = _as_float(_require(psf_table, "fwhm_nm", f"{path}: [psf]"),
                     f"{path}: [psf].fwhm_nm")
    try:
        psf = PSFModel(fwhm_nm=fwhm)
    except ValueError as exc:
        raise SceneFormatError(f"{path}: [psf].fwhm_nm: {exc}")

    background = 0.0
    if "background" in data:
        bg_table = data["background"]
        if not isinstance(bg_table, dict):
            raise SceneFormatError(f"{path}: [background] must be a table")
        background = _as_float(
            _require(bg_table, "mean_per_pulse", f"{path}: [background]"),
            f"{path}: [background].mean_per_pulse")
        if background < 0:
            raise SceneFormatError(
                f"{path}: [background].mean_per_pulse must be >= 0, got {background}")

    emitters = []
    for i, em_table in enumerate(data.get("emitter", [])):
        where = f"{path}: [[emitter]] #{i + 1}"
        if not isinstance(em_table, dict):
            raise SceneFormatError(f"{where}: must be a table")
        x = _as_float(_require(em_table, "x_nm", where), f"{where}.x_nm")
        y = _as_float(_require(em_table, "y_nm", where), f"{where}.y_nm")
        peak = _as_float(_require(em_table, "peak_probability", where),
                         f"{where}.peak_probability")
        try:
            emitters.append(Emitter(x_nm=x, y_nm=y, peak_probability=peak))
        except ValueError as exc:
            raise SceneFormatError(f"{where}: {exc}")

    scene = Scene(emitters=tuple(emitters), psf=psf, background_mean=background)

    grid = None
    if "grid" in data:
        g = data["grid"]
        where = f"{path}: [grid]"
        if not isinstance(g, dict):
            raise SceneFormatError(f"{where} must be a table")
        origin = _require(g, "origin", where)
        if (not isinstance(origin, list) or len(origin) != 2):
            raise SceneFormatError(f"{where}.origin must be a two-element array")
        ox = _as_float(origin[0], f"{where}.origin[0]")
        oy = _as_float(origin[1], f"{where}.origin[1]")
        pitch = _as_float(_require(g, "pitch_nm", where), f"{where}.pitch_nm")
        width = _as_int(_require(g, "width", where), f"{where}.width")
        height = _as_int(_require(g, "height", where), f"{where}.height")
        try:
            grid = ScanGrid(origin=(ox, oy), pitch=pitch, width=width, height=height)
        except ValueError as exc:
            raise SceneFormatError(f"{where}: {exc}")

    return scene, grid


def scene_fingerprint(scene: Scene) -> str:
    """sha256 over the scene's physical parameters, canonically serialized.

    Identifies the scene in acquisition manifests independently of which
    file (if any) it came from.
    """
    payload = {
        "psf_fwhm_nm": f"{scene.psf.fwhm_nm:.17g}",
        "background_mean": f"{scene.background_mean:.17g}",
        "emitters": [
            [f"{e.x_nm:.17g}", f"{e.y_nm:.17g}", f"{e.peak_probability:.17g}"]
            for e in scene.emitters
        ],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


def bundled_scene_names() -> list[str]:
    """Names of the demo scenes shipped inside the package."""
    root = resources.files("abscope") / "scenes"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def bundled_scene_path(name: str) -> Path:
    """Filesystem path of a bundled demo scene (name without .toml)."""
    candidate = resources.files("abscope") / "scenes" / f"{name}.toml"
    if not candidate.is_file():
        raise SceneFormatError(
            f"no bundled scene named {name!r}; available: {bundled_scene_names()}")
    return Path(str(candidate))


# -- exact scan --------------------------------------------------------


def _scan_row(scene: Scene, grid: ScanGrid, row: int, max_order: int):
    """Exact per-pixel statistics along one grid row.

    Returns (intensity, g_rows, sr_rows, defined) where g_rows/sr_rows map
    order -> array over columns and defined marks pixels with nonzero mean.
    """
    width = grid.width
    intensity = np.zeros(width)
    defined = np.zeros(width, dtype=bool)
    g_rows = {k: np.zeros(width) for k in range(2, max_order + 1)}
    sr_rows = {k: np.zeros(width) for k in range(2, max_order + 1)}
    expansions = [power_sum_expansion(k) for k in range(2, max_order + 1)]
    for col in range(width):
        probs, b = pixel_probabilities(scene, grid.point(row, col))
        moments = factorial_moments_with_background(probs, b, max_order)
        intensity[col] = moments[1]
        try:
            g = g_from_moments(moments)
        except DarkPixelError:
            continue
        defined[col] = True
        for expansion in expansions:
            k = expansion.order
            g_rows[k][col] = g[k]
            sr_rows[k][col] = evaluate_power_sum(expansion, moments[1], g)
    return intensity, g_rows, sr_rows, defined


def scan_exact(scene: Scene, grid: ScanGrid, max_order: int = 5,
               threads: int = 1) -> MapStack:
    """Closed-form scan of a scene: no sampling, no estimator noise.

    Produces layers ``intensity``, ``g2``..``g<max_order>`` and
    ``sr2``..``sr<max_order>``.  Correlation and power-sum layers are
    undefined (masked out) at dark pixels, where the mean count is zero
    and g has no value.
    """
    if not 2 <= max_order <= MAX_ORDER:
        raise ValueError(f"max_order must lie in [2, {MAX_ORDER}], got {max_order}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")

    shape = grid.shape
    intensity = np.zeros(shape)
    defined = np.zeros(shape, dtype=bool)
    g_maps = {k: np.zeros(shape) for k in range(2, max_order + 1)}
    sr_maps = {k: np.zeros(shape) for k in range(2, max_order + 1)}

    def run(row: int):
        return row, _scan_row(scene, grid, row, max_order)

    if threads == 1:
        results = map(run, range(grid.height))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(grid.height)))
    for row, (row_intensity, g_rows, sr_rows, row_defined) in results:
        intensity[row] = row_intensity
        defined[row] = row_defined
        for k in g_maps:
            g_maps[k][row] = g_rows[k]
            sr_maps[k][row] = sr_rows[k]

    stack = MapStack(grid=grid)
    stack.add_layer("intensity", intensity)
    for k in range(2, max_order + 1):
        stack.add_layer(f"g{k}", g_maps[k], defined)
    for k in range(2, max_order + 1):
        stack.add_layer(f"sr{k}", sr_maps[k], defined)
    return stack
