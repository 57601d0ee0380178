"""Estimation of the mean count and normalized correlations from tallies.

Photon-number-resolving data uses the plug-in estimator

    F_hat_k = (1/M) sum over pulses of N(N-1)...(N-k+1)
    g_hat_k = F_hat_k / F_hat_1^k

computed directly from the count histogram.  Detector-tree data uses the
coincidence estimator: for each k-subset of detectors count the pulses
where the whole subset clicked, and normalize by the product of measured
singles rates summed over the same subsets.  Normalizing by measured
singles (not by the nominal splitting ratios) makes imperfect splitters
self-correcting.  The tree estimator is a low-flux approximation; its
relative bias is of order the mean count per pulse, and a warning flag is
raised above mean 0.1.

Standard errors come from a delete-block jackknife over the pulse blocks
recorded at acquisition time (default 100).  Each replicate removes one
block and re-runs the full estimator; replicates where an estimate is
undefined (zero denominator) are dropped from that order's spread.  With
fewer than two usable replicates the standard error is reported as 0 and
the block count in the result tells the caller no spread was available.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .algebra import MAX_ORDER, GVector
from .mapstack import MapStack
from .montecarlo import DetectorModel, PixelTally, RawScan

__all__ = [
    "LOW_FLUX_LIMIT",
    "PixelStatistics",
    "estimate_from_counts",
    "estimate_from_tree",
    "estimate_scan",
]

# Above this mean count per pulse the tree estimator's bias is no longer
# comfortably below typical statistical errors.
LOW_FLUX_LIMIT = 0.1


@dataclass
class PixelStatistics:
    """Per-pixel estimates: mean count, g orders 2..K, jackknife errors.

    ``g_se`` and ``defined`` are aligned with correlation orders 1..K
    (index k-1).  Order 1 is the constant g=1; its error is 0 and it is
    defined whenever the mean estimate is positive.
    """

    mean_n: float
    mean_se: float
    g: GVector
    g_se: np.ndarray
    defined: np.ndarray
    pulses: int
    blocks: int
    flux_warning: bool = False

    def se(self, k: int) -> float:
        if not 1 <= k <= self.g.order:
            raise IndexError(f"order {k} outside 1..{self.g.order}")
        return float(self.g_se[k - 1])

    def is_defined(self, k: int) -> bool:
        if not 1 <= k <= self.g.order:
            raise IndexError(f"order {k} outside 1..{self.g.order}")
        return bool(self.defined[k - 1])


def _falling_matrix(outcomes: np.ndarray, K: int) -> np.ndarray:
    """Column k-1 holds n(n-1)...(n-k+1) for each outcome n."""
    vals = outcomes.astype(np.float64)
    out = np.empty((len(outcomes), K))
    cur = np.ones(len(outcomes))
    for k in range(1, K + 1):
        cur = cur * (vals - (k - 1))
        out[:, k - 1] = cur
    return out


def _pnr_rows(count_rows: np.ndarray, outcomes: np.ndarray, K: int,
              pulses_rows: np.ndarray):
    """Estimator applied to each row of counts; rows may be full totals or
    leave-one-out replicates."""
    fall = _falling_matrix(outcomes, K)
    moments = (count_rows @ fall) / pulses_rows[:, None]
    mean = moments[:, 0]
    rows = count_rows.shape[0]
    g = np.zeros((rows, K - 1))
    ok = np.zeros((rows, K - 1), dtype=bool)
    pos = mean > 0
    for k in range(2, K + 1):
        g[pos, k - 2] = moments[pos, k - 1] / mean[pos] ** k
        ok[:, k - 2] = pos
    return mean, g, ok


def _tree_rows(count_rows: np.ndarray, outcomes: np.ndarray, d: int, K: int,
               pulses_rows: np.ndarray):
    rows = count_rows.shape[0]
    singles = np.empty((rows, d))
    for i in range(d):
        sel = (outcomes & (1 << i)) != 0
        singles[:, i] = count_rows[:, sel].sum(axis=1)
    s_hat = singles / pulses_rows[:, None]
    mean = s_hat.sum(axis=1)
    g = np.zeros((rows, K - 1))
    ok = np.zeros((rows, K - 1), dtype=bool)
    for k in range(2, K + 1):
        coincidences = np.zeros(rows)
        normalizer = np.zeros(rows)
        for subset in combinations(range(d), k):
            submask = sum(1 << i for i in subset)
            sel = (outcomes & submask) == submask
            coincidences += count_rows[:, sel].sum(axis=1)
            prod = np.ones(rows)
            for i in subset:
                prod = prod * s_hat[:, i]
            normalizer += prod
        pos = normalizer > 0
        g[pos, k - 2] = (coincidences[pos] / pulses_rows[pos]) / normalizer[pos]
        ok[:, k - 2] = pos
    return mean, g, ok


def _jackknife_se(replicates: np.ndarray, usable: np.ndarray) -> float:
    values = replicates[usable]
    m = len(values)
    if m < 2:
        return 0.0
    centered = values - values.mean()
    return float(np.sqrt((m - 1) / m * np.dot(centered, centered)))


def _assemble(tally: PixelTally, K: int, estimator, flux_warning_on: bool):
    totals = tally.counts[None, :]
    full_pulses = np.array([float(tally.pulses)])
    mean, g, ok = estimator(totals, full_pulses)
    mean = float(mean[0])

    g_se = np.zeros(K)
    mean_se = 0.0
    if tally.blocks >= 2:
        block_pulses = tally.block_counts.sum(axis=1)
        loo_counts = tally.counts[None, :] - tally.block_counts
        loo_pulses = (tally.pulses - block_pulses).astype(np.float64)
        loo_mean, loo_g, loo_ok = estimator(loo_counts, loo_pulses)
        mean_se = _jackknife_se(loo_mean, np.ones(tally.blocks, dtype=bool))
        for k in range(2, K + 1):
            g_se[k - 1] = _jackknife_se(loo_g[:, k - 2], loo_ok[:, k - 2])

    values = [1.0] + [float(g[0, k - 2]) for k in range(2, K + 1)]
    defined = np.concatenate(([mean > 0], ok[0]))
    return PixelStatistics(
        mean_n=mean, mean_se=mean_se, g=GVector(tuple(values)), g_se=g_se,
        defined=defined, pulses=tally.pulses, blocks=tally.blocks,
        flux_warning=bool(flux_warning_on and mean > LOW_FLUX_LIMIT))


def estimate_from_counts(tally: PixelTally, K: int) -> PixelStatistics:
    """Plug-in estimates from a photon-count histogram, orders up to K."""
    if not 2 <= K <= MAX_ORDER:
        raise ValueError(f"K must lie in 2..{MAX_ORDER}, got {K}")
    if tally.counts.sum() < 1:
        raise ValueError("tally is empty")

    def run(rows, pulses_rows):
        return _pnr_rows(rows, tally.outcomes, K, pulses_rows)

    return _assemble(tally, K, run, flux_warning_on=False)


def estimate_from_tree(tally: PixelTally, detector: DetectorModel,
                       K: int) -> PixelStatistics:
    """Coincidence-based estimates from click-mask counts, orders up to K.

    K cannot exceed the detector count: a k-fold coincidence needs k
    detectors.  The mean count reported is the sum of singles rates, a
    low-flux approximation like the g estimator itself.
    """
    if detector.kind != "tree":
        raise ValueError("estimate_from_tree needs a tree detector")
    if not 2 <= K <= detector.detectors:
        raise ValueError(
            f"K must lie in 2..{detector.detectors} (detector count), got {K}")
    if tally.counts.sum() < 1:
        raise ValueError("tally is empty")

    def run(rows, pulses_rows):
        return _tree_rows(rows, tally.outcomes, detector.detectors, K,
                          pulses_rows)

    return _assemble(tally, K, run, flux_warning_on=True)


def estimate_scan(raw: RawScan, K: int) -> MapStack:
    """Per-pixel estimates over a whole acquisition.

    Layers: ``intensity``, ``se_intensity``, then ``g<k>`` and ``se_g<k>``
    for k = 2..K, masked where the per-pixel estimate is undefined.
    """
    detector = raw.detector
    if detector.kind == "tree" and K > detector.detectors:
        raise ValueError(
            f"K={K} exceeds the {detector.detectors}-detector tree")
    shape = raw.grid.shape
    intensity = np.zeros(shape)
    se_intensity = np.zeros(shape)
    g_maps = {k: np.zeros(shape) for k in range(2, K + 1)}
    se_maps = {k: np.zeros(shape) for k in range(2, K + 1)}
    defined = {k: np.zeros(shape, dtype=bool) for k in range(2, K + 1)}
    for index, tally in enumerate(raw.tallies):
        if detector.kind == "pnr":
            stats = estimate_from_counts(tally, K)
        else:
            stats = estimate_from_tree(tally, detector, K)
        row, col = divmod(index, raw.grid.width)
        intensity[row, col] = stats.mean_n
        se_intensity[row, col] = stats.mean_se
        for k in range(2, K + 1):
            g_maps[k][row, col] = stats.g[k]
            se_maps[k][row, col] = stats.se(k)
            defined[k][row, col] = stats.is_defined(k)
    stack = MapStack(grid=raw.grid)
    stack.add_layer("intensity", intensity)
    stack.add_layer("se_intensity", se_intensity)
    for k in range(2, K + 1):
        stack.add_layer(f"g{k}", g_maps[k], defined[k])
        stack.add_layer(f"se_g{k}", se_maps[k], defined[k])
    return stack
