"""Pulsed-excitation Monte Carlo acquisition.

Per pulse, each emitter independently contributes one photon with its
local detection probability and the background contributes a Poisson
number of accidental photons.  Two detector variants digitize the pulse:

* ``pnr``  -- an ideal photon-number-resolving detector records the total
  photon count.
* ``tree`` -- the light is split over ``d`` non-number-resolving click
  detectors (routing probabilities ``splitting``); each detector clicks
  when it receives at least one photon and the pulse records the d-bit
  click mask.

Sampling engine
---------------
Pulses are i.i.d., so instead of looping over pulses the simulator first
computes the exact per-pulse outcome distribution (photon-count vector or
click-mask vector) in closed form, then draws the per-block outcome
tallies as multinomials with each block's pulse count.  The joint law of
the block tallies is identical to tallying pulses one at a time in order,
block by block, but runs in time independent of the pulse budget.  Blocks
are drawn at generation time; an aggregated tally is never re-split.
Outcomes that are physically impossible (e.g. a two-detector coincidence
from a single emitter with no background) carry probability exactly 0.0
and can never be drawn.

Per-pixel seeds are derived from the scan seed and the pixel coordinates
alone (`derive_pixel_seed`), so results do not depend on execution order
or thread count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mapstack import ScanGrid
from .scene import Scene, pixel_probabilities, scene_fingerprint

__all__ = [
    "RNG_ID",
    "RAWSCAN_FORMAT",
    "DetectorModel",
    "PixelTally",
    "RawScan",
    "derive_pixel_seed",
    "photon_count_distribution",
    "tree_click_distribution",
    "simulate_pixel",
    "simulate_scan",
]

RNG_ID = "numpy-pcg64"
RAWSCAN_FORMAT = "abscope-rawscan/1"
MAX_TREE_DETECTORS = 12

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_pixel_seed(base_seed: int, row: int, col: int) -> int:
    """64-bit per-pixel seed: two SplitMix64 rounds absorbing row then col.

    z0 = base_seed mod 2^64
    z1 = splitmix64(z0 + 0x9E3779B97F4A7C15 + row)
    z2 = splitmix64(z1 + 0x9E3779B97F4A7C15 + col)

    where splitmix64 is the standard finalizer
    (xorshift 30, * 0xBF58476D1CE4E5B9, xorshift 27, * 0x94D049BB133111EB,
    xorshift 31), all arithmetic mod 2^64.  Depends only on
    (base_seed, row, col), never on execution order.
    """
    z = base_seed & _MASK64
    z = _splitmix64((z + _GOLDEN + row) & _MASK64)
    z = _splitmix64((z + _GOLDEN + col) & _MASK64)
    return z


@dataclass(frozen=True)
class DetectorModel:
    """Detection variant: ``pnr`` or a ``tree`` of click detectors."""

    kind: str
    detectors: int = 0
    splitting: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "pnr":
            if self.detectors or self.splitting:
                raise ValueError("pnr detector takes no tree parameters")
        elif self.kind == "tree":
            if not 2 <= self.detectors <= MAX_TREE_DETECTORS:
                raise ValueError(
                    f"tree needs 2..{MAX_TREE_DETECTORS} detectors, "
                    f"got {self.detectors}")
            if len(self.splitting) != self.detectors:
                raise ValueError(
                    f"splitting has {len(self.splitting)} entries for "
                    f"{self.detectors} detectors")
            if any(s < 0 for s in self.splitting):
                raise ValueError("splitting probabilities must be >= 0")
            if abs(sum(self.splitting) - 1.0) > 1e-12:
                raise ValueError(
                    f"splitting must sum to 1 within 1e-12, "
                    f"got {sum(self.splitting)!r}")
        else:
            raise ValueError(f"unknown detector kind {self.kind!r}")

    @classmethod
    def pnr(cls) -> "DetectorModel":
        return cls(kind="pnr")

    @classmethod
    def tree(cls, detectors: int,
             splitting: tuple[float, ...] | None = None) -> "DetectorModel":
        if splitting is None:
            splitting = (1.0 / detectors,) * detectors
        return cls(kind="tree", detectors=detectors, splitting=tuple(splitting))

    @classmethod
    def parse(cls, text: str) -> "DetectorModel":
        """Parse ``pnr``, ``tree:<d>``, or ``tree:<d>:<s1,...,sd>``."""
        parts = text.strip().split(":")
        if parts == ["pnr"]:
            return cls.pnr()
        if parts[0] != "tree" or len(parts) not in (2, 3):
            raise ValueError(f"cannot parse detector {text!r}; expected "
                             "'pnr', 'tree:<d>' or 'tree:<d>:<s1,...,sd>'")
        try:
            d = int(parts[1])
        except ValueError:
            raise ValueError(f"detector count in {text!r} is not an integer")
        splitting = None
        if len(parts) == 3:
            try:
                splitting = tuple(float(s) for s in parts[2].split(","))
            except ValueError:
                raise ValueError(f"bad splitting list in {text!r}")
        return cls.tree(d, splitting)

    def describe(self) -> str:
        if self.kind == "pnr":
            return "pnr"
        return "tree:{}:{}".format(
            self.detectors, ",".join(f"{s:.17g}" for s in self.splitting))

    def to_json(self) -> dict:
        if self.kind == "pnr":
            return {"kind": "pnr"}
        return {"kind": "tree", "detectors": self.detectors,
                "splitting": list(self.splitting)}

    @classmethod
    def from_json(cls, data: dict) -> "DetectorModel":
        if data["kind"] == "pnr":
            return cls.pnr()
        return cls.tree(int(data["detectors"]),
                        tuple(float(s) for s in data["splitting"]))


# -- exact per-pulse outcome distributions -----------------------------


def _poisson_pmf(mean: float) -> np.ndarray:
    """pmf of Poisson(mean) truncated where the residual tail is < 1e-16."""
    if mean == 0.0:
        return np.array([1.0])
    terms = [math.exp(-mean)]
    k = 0
    while k < mean + 10 or terms[-1] > 1e-16:
        k += 1
        terms.append(terms[-1] * mean / k)
        if k > 400:
            break
    return np.array(terms)


def photon_count_distribution(probs, background_mean: float) -> np.ndarray:
    """P(total photons per pulse = n) for n = 0..len(result)-1.

    Convolution of one two-point Bernoulli factor per emitter with a
    truncated Poisson factor for the background.  With no background the
    support ends exactly at the number of emitters.
    """
    dist = np.array([1.0])
    for p in probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"emitter probability {p} outside [0, 1]")
        dist = np.convolve(dist, [1.0 - p, p])
    if background_mean < 0:
        raise ValueError("background mean must be >= 0")
    if background_mean > 0:
        dist = np.convolve(dist, _poisson_pmf(background_mean))
    return dist / dist.sum()


def tree_click_distribution(probs, background_mean: float,
                            detector: DetectorModel) -> np.ndarray:
    """P(click mask = m) for m = 0..2^d - 1, bit i = detector i clicked.

    Each emitter photon routes to detector i with probability
    splitting[i]; background photons are thinned per detector, so detector
    i sees an independent Poisson with mean background*splitting[i] and
    clicks on it with probability 1 - exp(-background*splitting[i]).
    Masks that would need more photons than the scene can supply keep
    probability exactly 0.0.
    """
    if detector.kind != "tree":
        raise ValueError("tree_click_distribution needs a tree detector")
    d = detector.detectors
    split = detector.splitting
    dist = np.zeros(1 << d)
    dist[0] = 1.0
    for i in range(d):
        q = -math.expm1(-background_mean * split[i])
        if q == 0.0:
            continue
        bit = 1 << i
        nxt = np.zeros_like(dist)
        for mask in range(1 << d):
            if dist[mask] == 0.0:
                continue
            nxt[mask] += (1.0 - q) * dist[mask]
            nxt[mask | bit] += q * dist[mask]
        dist = nxt
    for p in probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"emitter probability {p} outside [0, 1]")
        if p == 0.0:
            continue
        nxt = (1.0 - p) * dist
        for mask in range(1 << d):
            if dist[mask] == 0.0:
                continue
            for i in range(d):
                nxt[mask | (1 << i)] += p * split[i] * dist[mask]
        dist = nxt
    return dist / dist.sum()


# -- tallies and scans -------------------------------------------------


@dataclass
class PixelTally:
    """Outcome histogram for one pixel, kept per block.

    ``outcomes[j]`` is the integer outcome key (photon count for pnr,
    click mask for tree) of column j of ``block_counts``; rows are pulse
    blocks in acquisition order.
    """

    outcomes: np.ndarray
    block_counts: np.ndarray
    pulses: int

    @property
    def blocks(self) -> int:
        return self.block_counts.shape[0]

    @property
    def counts(self) -> np.ndarray:
        """Totals over blocks, aligned with ``outcomes``."""
        return self.block_counts.sum(axis=0)


def _block_sizes(pulses: int, blocks: int) -> list[int]:
    base, rem = divmod(pulses, blocks)
    return [base + 1] * rem + [base] * (blocks - rem)


def _outcome_distribution(scene: Scene, point, detector: DetectorModel):
    probs, background = pixel_probabilities(scene, point)
    if detector.kind == "pnr":
        dist = photon_count_distribution(probs, background)
    else:
        dist = tree_click_distribution(probs, background, detector)
    return np.arange(len(dist), dtype=np.int64), dist


def simulate_pixel(scene: Scene, point, pulses: int, detector: DetectorModel,
                   seed: int, blocks: int = 1) -> PixelTally:
    """Acquire one pixel: ``pulses`` pulses tallied into ``blocks`` blocks."""
    if pulses < 1:
        raise ValueError(f"pulses must be >= 1, got {pulses}")
    if not 1 <= blocks <= pulses:
        raise ValueError(f"blocks must lie in 1..pulses, got {blocks}")
    outcomes, dist = _outcome_distribution(scene, point, detector)
    rng = np.random.Generator(np.random.PCG64(seed))
    block_counts = np.empty((blocks, len(dist)), dtype=np.int64)
    for b, size in enumerate(_block_sizes(pulses, blocks)):
        block_counts[b] = rng.multinomial(size, dist)
    return PixelTally(outcomes=outcomes, block_counts=block_counts, pulses=pulses)


@dataclass
class RawScan:
    """Aggregated acquisition for a whole grid, pixel tallies in row-major
    order."""

    grid: ScanGrid
    detector: DetectorModel
    pulses: int
    base_seed: int
    blocks: int
    tallies: list[PixelTally] = field(default_factory=list)
    rng_id: str = RNG_ID
    scene_hash: str = ""

    def tally(self, row: int, col: int) -> PixelTally:
        return self.tallies[row * self.grid.width + col]

    # -- persistence ---------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": RAWSCAN_FORMAT,
            "grid": self.grid.to_json(),
            "detector": self.detector.to_json(),
            "pulses": self.pulses,
            "blocks": self.blocks,
            "base_seed": self.base_seed,
            "rng": self.rng_id,
            "scene_hash": self.scene_hash,
        }
        (directory / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        lines = ["pixel_index,outcome_key,count"]
        for index, tally in enumerate(self.tallies):
            totals = tally.counts
            for j in np.flatnonzero(totals):
                lines.append(f"{index},{tally.outcomes[j]},{totals[j]}")
        (directory / "tallies.csv").write_text("\n".join(lines) + "\n")
        if self.blocks > 1:
            lines = ["pixel_index,block,outcome_key,count"]
            for index, tally in enumerate(self.tallies):
                for b in range(tally.blocks):
                    row = tally.block_counts[b]
                    for j in np.flatnonzero(row):
                        lines.append(f"{index},{b},{tally.outcomes[j]},{row[j]}")
            (directory / "blocks.csv").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "RawScan":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format") != RAWSCAN_FORMAT:
            raise ValueError(
                f"unsupported raw-scan format {manifest.get('format')!r}")
        grid = ScanGrid.from_json(manifest["grid"])
        detector = DetectorModel.from_json(manifest["detector"])
        pulses = int(manifest["pulses"])
        blocks = int(manifest["blocks"])
        n_pixels = grid.width * grid.height
        per_pixel: list[dict[int, int]] = [dict() for _ in range(n_pixels)]
        text = (directory / "tallies.csv").read_text().splitlines()
        if text[0] != "pixel_index,outcome_key,count":
            raise ValueError("tallies.csv has an unexpected header")
        for line in text[1:]:
            idx_s, key_s, count_s = line.split(",")
            per_pixel[int(idx_s)][int(key_s)] = int(count_s)
        tallies = []
        outcome_col: list[dict[int, int]] = []
        for index in range(n_pixels):
            keys = np.array(sorted(per_pixel[index]), dtype=np.int64)
            totals = np.array([per_pixel[index][k] for k in keys], dtype=np.int64)
            block_counts = totals[None, :].copy() if blocks == 1 else \
                np.zeros((blocks, len(keys)), dtype=np.int64)
            tallies.append(PixelTally(outcomes=keys, block_counts=block_counts,
                                      pulses=pulses))
            outcome_col.append({int(k): j for j, k in enumerate(keys)})
        if blocks > 1:
            text = (directory / "blocks.csv").read_text().splitlines()
            if text[0] != "pixel_index,block,outcome_key,count":
                raise ValueError("blocks.csv has an unexpected header")
            for line in text[1:]:
                idx_s, b_s, key_s, count_s = line.split(",")
                index = int(idx_s)
                j = outcome_col[index][int(key_s)]
                tallies[index].block_counts[int(b_s), j] = int(count_s)
        scan = cls(grid=grid, detector=detector, pulses=pulses,
                   base_seed=int(manifest["base_seed"]), blocks=blocks,
                   tallies=tallies, rng_id=manifest.get("rng", RNG_ID),
                   scene_hash=manifest.get("scene_hash", ""))
        return scan


def simulate_scan(scene: Scene, grid: ScanGrid, pulses: int,
                  detector: DetectorModel, base_seed: int,
                  blocks: int = 100, threads: int = 1) -> RawScan:
    """Acquire every grid pixel with per-pixel seeds mixed from
    (base_seed, row, col).

    Block sub-tallies (default 100 blocks) feed the delete-block jackknife
    downstream.  Results are bit-identical for any thread count.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")

    def run_row(row: int) -> list[PixelTally]:
        return [
            simulate_pixel(scene, grid.point(row, col), pulses, detector,
                           derive_pixel_seed(base_seed, row, col), blocks)
            for col in range(grid.width)
        ]

    if threads == 1:
        rows = [run_row(r) for r in range(grid.height)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_row, range(grid.height)))
    tallies = [tally for row in rows for tally in row]
    return RawScan(grid=grid, detector=detector, pulses=pulses,
                   base_seed=base_seed, blocks=blocks, tallies=tallies,
                   scene_hash=scene_fingerprint(scene))
