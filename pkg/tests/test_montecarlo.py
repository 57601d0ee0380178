"""Acquisition engine against literal per-pulse sampling and enumeration.

The engine draws block tallies from a closed-form outcome distribution.
These tests check that distribution against exact enumeration (rational
arithmetic) and against a literal pulse-by-pulse sampler that mimics the
physical process step by step, then check the tally plumbing: seeds,
blocks, persistence, determinism.
"""

import itertools
import math
from collections import defaultdict
from fractions import Fraction

import numpy as np
import pytest

from abscope.algebra import factorial_moments_with_background
from abscope.mapstack import ScanGrid
from abscope.montecarlo import (
    RNG_ID,
    DetectorModel,
    RawScan,
    derive_pixel_seed,
    photon_count_distribution,
    simulate_pixel,
    simulate_scan,
    tree_click_distribution,
)
from abscope.scene import Emitter, PSFModel, Scene

# ---------------------------------------------------------------- oracles


def pnr_enum(probs):
    """Exact photon-count pmf with no background: enumerate emitter subsets."""
    probs = [Fraction(p) for p in probs]
    pmf = defaultdict(Fraction)
    for emitted in itertools.product([0, 1], repeat=len(probs)):
        weight = Fraction(1)
        for p, e in zip(probs, emitted):
            weight *= p if e else 1 - p
        pmf[sum(emitted)] += weight
    return pmf


def tree_enum(probs, splitting):
    """Exact click-mask pmf with no background: enumerate emissions and
    routings."""
    d = len(splitting)
    probs = [Fraction(p) for p in probs]
    splitting = [Fraction(s) for s in splitting]
    pmf = defaultdict(Fraction)
    for emitted in itertools.product([0, 1], repeat=len(probs)):
        weight = Fraction(1)
        for p, e in zip(probs, emitted):
            weight *= p if e else 1 - p
        photons = sum(emitted)
        for routing in itertools.product(range(d), repeat=photons):
            route_weight = weight
            mask = 0
            for det in routing:
                route_weight *= splitting[det]
                mask |= 1 << det
            pmf[mask] += route_weight
    return pmf


def literal_pnr_counts(probs, background, pulses, rng):
    """Pulse-by-pulse sampler: Bernoulli per emitter plus Poisson extras."""
    hits = (rng.random((pulses, len(probs))) < np.asarray(probs)).sum(axis=1) \
        if probs else np.zeros(pulses, dtype=np.int64)
    totals = hits + rng.poisson(background, pulses)
    return np.bincount(totals)


def literal_tree_counts(probs, background, splitting, pulses, rng):
    """Pulse-by-pulse sampler routing every photon through the splitters."""
    cum = np.cumsum(splitting)
    counts = np.zeros(1 << len(splitting), dtype=np.int64)
    for _ in range(pulses):
        mask = 0
        for p in probs:
            if rng.random() < p:
                mask |= 1 << int(np.searchsorted(cum, rng.random(), side="right"))
        for _ in range(rng.poisson(background)):
            mask |= 1 << int(np.searchsorted(cum, rng.random(), side="right"))
        counts[mask] += 1
    return counts


def assert_counts_match_pmf(counts, pmf, pulses):
    """Each observed tally within 5 sigma (plus small-count slack) of its
    expectation."""
    size = max(len(counts), len(pmf))
    for key in range(size):
        expected = pulses * (pmf[key] if key < len(pmf) else 0.0)
        observed = counts[key] if key < len(counts) else 0
        spread = math.sqrt(max(expected * (1.0 - expected / pulses), 0.0))
        assert abs(observed - expected) <= 5.0 * spread + 6.0, (
            f"outcome {key}: observed {observed}, expected {expected:.1f}")


def scene_at_origin(probs, background=0.0):
    """Scene whose emitters all sit on the scan point, so their detection
    probabilities at (0, 0) are exactly the requested values."""
    emitters = tuple(Emitter(0.0, 0.0, p) for p in probs)
    return Scene(emitters=emitters, psf=PSFModel(fwhm_nm=500.0),
                 background_mean=background)


# ----------------------------------------------------------------- tests


class TestDetectorModel:
    def test_parse_pnr(self):
        det = DetectorModel.parse("pnr")
        assert det.kind == "pnr"
        assert det.describe() == "pnr"

    def test_parse_equal_tree(self):
        det = DetectorModel.parse("tree:3")
        assert det.kind == "tree"
        assert det.detectors == 3
        assert det.splitting == pytest.approx((1 / 3, 1 / 3, 1 / 3))

    def test_parse_explicit_splitting(self):
        det = DetectorModel.parse("tree:3:0.5,0.25,0.25")
        assert det.splitting == (0.5, 0.25, 0.25)
        assert DetectorModel.parse(det.describe()) == det

    def test_rejects_malformed(self):
        for text in ["foo", "tree", "tree:x", "tree:1", "tree:3:0.5,0.5",
                     "tree:2:0.6,0.6", "tree:2:-0.5,1.5"]:
            with pytest.raises(ValueError):
                DetectorModel.parse(text)

    def test_json_round_trip(self):
        for det in [DetectorModel.pnr(), DetectorModel.tree(4),
                    DetectorModel.tree(2, (0.7, 0.3))]:
            assert DetectorModel.from_json(det.to_json()) == det


class TestSeedMixing:
    def test_matches_documented_algorithm(self):
        # Reimplementation of the documented mixing recipe, written out
        # independently of the library code.
        mask = (1 << 64) - 1

        def finalize(z):
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
            return z ^ (z >> 31)

        for base, row, col in [(0, 0, 0), (42, 3, 5), (2 ** 63, 1000, 999)]:
            z = finalize((base + 0x9E3779B97F4A7C15 + row) & mask)
            z = finalize((z + 0x9E3779B97F4A7C15 + col) & mask)
            assert derive_pixel_seed(base, row, col) == z

    def test_neighboring_pixels_differ(self):
        seeds = {derive_pixel_seed(7, r, c) for r in range(20) for c in range(20)}
        assert len(seeds) == 400

    def test_row_col_not_interchangeable(self):
        assert derive_pixel_seed(7, 2, 9) != derive_pixel_seed(7, 9, 2)


class TestPhotonCountDistribution:
    def test_exact_no_background(self):
        probs = [0.25, 0.5, 0.125]
        dist = photon_count_distribution(probs, 0.0)
        oracle = pnr_enum(probs)
        assert len(dist) == 4
        for n in range(4):
            assert dist[n] == pytest.approx(float(oracle[n]), rel=1e-13)

    def test_support_ends_at_emitter_count(self):
        dist = photon_count_distribution([0.3, 0.3], 0.0)
        assert len(dist) == 3

    def test_single_emitter_two_point(self):
        dist = photon_count_distribution([0.2], 0.0)
        assert dist == pytest.approx([0.8, 0.2], rel=1e-15)

    def test_moments_match_symmetric_function_route(self):
        # The pmf is built by convolution; factorial moments of that pmf
        # must agree with the direct symmetric-function computation.
        probs = [0.31, 0.07, 0.55, 0.2]
        b = 0.04
        dist = photon_count_distribution(probs, b)
        moments = factorial_moments_with_background(probs, b, 5)
        ns = np.arange(len(dist), dtype=float)
        for k in range(1, 6):
            falling = np.ones_like(ns)
            for j in range(k):
                falling = falling * (ns - j)
            empirical = float(np.dot(dist, falling))
            assert empirical == pytest.approx(moments[k], rel=1e-9)

    def test_normalized(self):
        dist = photon_count_distribution([0.9, 0.1], 2.5)
        assert dist.sum() == pytest.approx(1.0, abs=1e-15)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            photon_count_distribution([1.2], 0.0)
        with pytest.raises(ValueError):
            photon_count_distribution([0.2], -0.1)


class TestTreeClickDistribution:
    def test_exact_no_background(self):
        probs = [0.25, 0.375]
        split = (0.5, 0.25, 0.25)
        det = DetectorModel.tree(3, split)
        dist = tree_click_distribution(probs, 0.0, det)
        oracle = tree_enum(probs, split)
        for mask in range(8):
            assert dist[mask] == pytest.approx(float(oracle[mask]), abs=1e-14)

    def test_occupancy_law_up_to_three_photons(self):
        # m certain photons (emitters with peak 1) thrown into d=3 bins.
        split = (0.5, 0.25, 0.25)
        det = DetectorModel.tree(3, split)
        for m in (1, 2, 3):
            dist = tree_click_distribution([1.0] * m, 0.0, det)
            oracle = tree_enum([1.0] * m, split)
            for mask in range(8):
                assert dist[mask] == pytest.approx(float(oracle[mask]),
                                                   abs=1e-14)

    def test_single_emitter_structural_zeros(self):
        det = DetectorModel.tree(3)
        dist = tree_click_distribution([0.9], 0.0, det)
        for mask in range(8):
            if bin(mask).count("1") >= 2:
                assert dist[mask] == 0.0

    def test_background_clicks_factorize(self):
        # Background-only masks: independent per-detector clicks.
        det = DetectorModel.tree(3, (0.5, 0.3, 0.2))
        b = 0.8
        dist = tree_click_distribution([], b, det)
        q = [-math.expm1(-b * s) for s in det.splitting]
        for mask in range(8):
            expected = 1.0
            for i in range(3):
                expected *= q[i] if mask & (1 << i) else 1.0 - q[i]
            assert dist[mask] == pytest.approx(expected, rel=1e-12)

    def test_against_literal_sampler(self):
        probs = [0.3, 0.15]
        split = (0.5, 0.3, 0.2)
        b = 0.2
        det = DetectorModel.tree(3, split)
        dist = tree_click_distribution(probs, b, det)
        rng = np.random.default_rng(2024)
        pulses = 30000
        counts = literal_tree_counts(probs, b, split, pulses, rng)
        assert_counts_match_pmf(counts, dist, pulses)

    def test_requires_tree(self):
        with pytest.raises(ValueError):
            tree_click_distribution([0.1], 0.0, DetectorModel.pnr())


class TestSimulatePixel:
    def test_empty_scene_all_zero(self):
        scene = scene_at_origin([])
        tally = simulate_pixel(scene, (0.0, 0.0), 500, DetectorModel.pnr(), 1)
        assert tally.counts[0] == 500

    def test_certain_emitter_always_one(self):
        scene = scene_at_origin([1.0])
        tally = simulate_pixel(scene, (0.0, 0.0), 500, DetectorModel.pnr(), 1)
        assert tally.counts[1] == 500
        assert tally.counts[0] == 0

    def test_tallies_sum_to_pulses(self):
        scene = scene_at_origin([0.4, 0.2], background=0.1)
        tally = simulate_pixel(scene, (0.0, 0.0), 12345, DetectorModel.pnr(),
                               99, blocks=7)
        assert tally.counts.sum() == 12345
        sizes = tally.block_counts.sum(axis=1)
        assert sizes.sum() == 12345
        assert sizes.max() - sizes.min() <= 1

    def test_single_photon_exclusion_pnr(self):
        scene = scene_at_origin([0.7])
        tally = simulate_pixel(scene, (0.0, 0.0), 10 ** 6,
                               DetectorModel.pnr(), 3)
        assert len(tally.counts) == 2

    def test_single_photon_exclusion_tree(self):
        scene = scene_at_origin([0.9])
        det = DetectorModel.tree(3)
        tally = simulate_pixel(scene, (0.0, 0.0), 10 ** 6, det, 4)
        multi = [bin(int(m)).count("1") >= 2 for m in tally.outcomes]
        assert tally.counts[np.array(multi)].sum() == 0

    def test_pnr_matches_literal_sampler(self):
        probs = [0.35, 0.1]
        b = 0.25
        scene = scene_at_origin(probs, background=b)
        pulses = 40000
        tally = simulate_pixel(scene, (0.0, 0.0), pulses,
                               DetectorModel.pnr(), 11)
        dist = photon_count_distribution(probs, b)
        assert_counts_match_pmf(tally.counts, dist, pulses)
        literal = literal_pnr_counts(probs, b, pulses,
                                     np.random.default_rng(12))
        assert_counts_match_pmf(literal, dist, pulses)

    def test_tree_matches_literal_sampler(self):
        probs = [0.3, 0.15]
        split = (0.5, 0.3, 0.2)
        b = 0.2
        scene = scene_at_origin(probs, background=b)
        det = DetectorModel.tree(3, split)
        pulses = 40000
        tally = simulate_pixel(scene, (0.0, 0.0), pulses, det, 5)
        dist = tree_click_distribution(probs, b, det)
        assert_counts_match_pmf(tally.counts, dist, pulses)

    def test_two_emitter_factorial_moment(self):
        # F_2 for two emitters at P=0.1 each is exactly 0.02.
        scene = scene_at_origin([0.1, 0.1])
        pulses = 10 ** 7
        tally = simulate_pixel(scene, (0.0, 0.0), pulses,
                               DetectorModel.pnr(), 77)
        pairs = float(tally.counts[2]) if len(tally.counts) > 2 else 0.0
        f2_hat = 2.0 * pairs / pulses
        se = math.sqrt(2.0 * 0.02 / pulses)  # binomial spread of pair count
        assert abs(f2_hat - 0.02) <= 3.0 * se

    def test_validation(self):
        scene = scene_at_origin([0.5])
        with pytest.raises(ValueError):
            simulate_pixel(scene, (0.0, 0.0), 0, DetectorModel.pnr(), 1)
        with pytest.raises(ValueError):
            simulate_pixel(scene, (0.0, 0.0), 10, DetectorModel.pnr(), 1,
                           blocks=11)


class TestSimulateScan:
    def small_scene(self):
        return Scene(emitters=(Emitter(0.0, 0.0, 0.3),),
                     psf=PSFModel(fwhm_nm=400.0), background_mean=0.01)

    def small_grid(self):
        return ScanGrid(origin=(-100.0, -100.0), pitch=100.0, width=3, height=3)

    def test_repeat_run_identical(self):
        scene, grid = self.small_scene(), self.small_grid()
        det = DetectorModel.pnr()
        a = simulate_scan(scene, grid, 2000, det, base_seed=123, blocks=10)
        b = simulate_scan(scene, grid, 2000, det, base_seed=123, blocks=10)
        for ta, tb in zip(a.tallies, b.tallies):
            assert np.array_equal(ta.block_counts, tb.block_counts)

    def test_thread_count_does_not_change_results(self):
        scene, grid = self.small_scene(), self.small_grid()
        det = DetectorModel.tree(3)
        serial = simulate_scan(scene, grid, 1500, det, base_seed=5, blocks=5,
                               threads=1)
        threaded = simulate_scan(scene, grid, 1500, det, base_seed=5, blocks=5,
                                 threads=4)
        for ta, tb in zip(serial.tallies, threaded.tallies):
            assert np.array_equal(ta.block_counts, tb.block_counts)

    def test_seed_changes_results(self):
        scene, grid = self.small_scene(), self.small_grid()
        det = DetectorModel.pnr()
        a = simulate_scan(scene, grid, 2000, det, base_seed=1, blocks=1)
        b = simulate_scan(scene, grid, 2000, det, base_seed=2, blocks=1)
        assert any(not np.array_equal(ta.block_counts, tb.block_counts)
                   for ta, tb in zip(a.tallies, b.tallies))

    def test_single_pulse_single_pixel(self):
        scene = self.small_scene()
        grid = ScanGrid(origin=(0.0, 0.0), pitch=1.0, width=1, height=1)
        scan = simulate_scan(scene, grid, 1, DetectorModel.pnr(), 9, blocks=1)
        assert len(scan.tallies) == 1
        assert scan.tallies[0].counts.sum() == 1

    def test_default_blocks(self):
        scene, grid = self.small_scene(), self.small_grid()
        scan = simulate_scan(scene, grid, 1000, DetectorModel.pnr(), 3)
        assert scan.blocks == 100
        assert scan.tally(0, 0).block_counts.shape[0] == 100

    def test_manifest_and_round_trip(self, tmp_path):
        scene, grid = self.small_scene(), self.small_grid()
        det = DetectorModel.tree(3, (0.5, 0.25, 0.25))
        scan = simulate_scan(scene, grid, 800, det, base_seed=21, blocks=4)
        scan.save(tmp_path / "scan")
        back = RawScan.load(tmp_path / "scan")
        assert back.grid == scan.grid
        assert back.detector == scan.detector
        assert back.pulses == scan.pulses
        assert back.blocks == scan.blocks
        assert back.base_seed == 21
        assert back.rng_id == RNG_ID
        assert back.scene_hash == scan.scene_hash
        for ta, tb in zip(scan.tallies, back.tallies):
            observed_a = {int(k): int(c) for k, c in
                          zip(ta.outcomes, ta.counts) if c > 0}
            observed_b = {int(k): int(c) for k, c in
                          zip(tb.outcomes, tb.counts) if c > 0}
            assert observed_a == observed_b
            assert tb.block_counts.sum() == scan.pulses

    def test_saved_files_byte_stable(self, tmp_path):
        scene, grid = self.small_scene(), self.small_grid()
        det = DetectorModel.pnr()
        scan = simulate_scan(scene, grid, 700, det, base_seed=8, blocks=7)
        scan.save(tmp_path / "a")
        scan.save(tmp_path / "b")
        back = RawScan.load(tmp_path / "a")
        back.save(tmp_path / "c")
        for name in ["manifest.json", "tallies.csv", "blocks.csv"]:
            raw = (tmp_path / "a" / name).read_bytes()
            assert raw == (tmp_path / "b" / name).read_bytes()
            assert raw == (tmp_path / "c" / name).read_bytes()

    def test_scene_hash_tracks_scene(self):
        grid = self.small_grid()
        det = DetectorModel.pnr()
        a = simulate_scan(self.small_scene(), grid, 100, det, 1, blocks=1)
        other = Scene(emitters=(Emitter(5.0, 0.0, 0.3),),
                      psf=PSFModel(fwhm_nm=400.0), background_mean=0.01)
        b = simulate_scan(other, grid, 100, det, 1, blocks=1)
        assert a.scene_hash != b.scene_hash


class TestMomentConvergence:
    def test_factorial_moments_within_four_errors(self):
        # k <= 3 at one million pulses: the empirical moments should sit
        # within 4 jackknife errors of the exact values for nearly every
        # seed; require 9 of 10 here.
        probs = [0.12, 0.08]
        b = 0.01
        scene = scene_at_origin(probs, background=b)
        exact = factorial_moments_with_background(probs, b, 3)
        pulses = 10 ** 6
        blocks = 100
        failures = 0
        for seed in range(10):
            tally = simulate_pixel(scene, (0.0, 0.0), pulses,
                                   DetectorModel.pnr(), seed, blocks=blocks)
            ns = tally.outcomes.astype(float)
            sizes = tally.block_counts.sum(axis=1).astype(float)
            for k in (1, 2, 3):
                falling = np.ones_like(ns)
                for j in range(k):
                    falling = falling * (ns - j)
                total = float(tally.counts @ falling) / pulses
                loo = ((tally.counts @ falling) - tally.block_counts @ falling) \
                    / (pulses - sizes)
                centered = loo - loo.mean()
                se = math.sqrt((blocks - 1) / blocks
                               * float(np.dot(centered, centered)))
                if abs(total - exact[k]) > 4.0 * se:
                    failures += 1
        assert failures <= 1
