"""abscope: super-resolution confocal imaging from photon-counting statistics.

Simulates single-photon emitters under a scanning Gaussian spot, estimates
photon-number autocorrelations g^(k) from per-pulse detection records (ideal
photon-number-resolving detector or a beam-splitter detector tree), and
reconstructs maps of sum_a P_a^k whose point-spread function is sqrt(k)
narrower than the intensity image.
"""

__version__ = "0.1.0"

from .algebra import (
    DarkPixelError,
    FactorialMomentVector,
    GVector,
    MAX_ORDER,
    PowerSumExpansion,
    elementary_symmetric,
    evaluate_power_sum,
    factorial_moments_bernoulli,
    factorial_moments_with_background,
    g_from_moments,
    partitions_of,
    power_sum_expansion,
    power_sum_partials,
    two_emitter_power_sum,
    write_coefficient_table,
)
from .analysis import (
    GaussianFit,
    TwoPeakFit,
    abbe_limit,
    fit_gaussian_1d,
    fit_two_gaussians_1d,
    narrowing_report,
)
from .estimation import (
    PixelStatistics,
    estimate_from_counts,
    estimate_from_tree,
    estimate_scan,
)
from .mapstack import MapStack, ScanGrid
from .montecarlo import (
    DetectorModel,
    PixelTally,
    RawScan,
    derive_pixel_seed,
    photon_count_distribution,
    simulate_pixel,
    simulate_scan,
    tree_click_distribution,
)
from .reconstruction import certify_two_emitter, error_propagate, reconstruct
from .scene import (
    Emitter,
    PSFModel,
    Scene,
    SceneFormatError,
    bundled_scene_names,
    bundled_scene_path,
    detection_probability,
    load_scene,
    scan_exact,
    scene_fingerprint,
)

__all__ = [
    "__version__",
    "DarkPixelError",
    "DetectorModel",
    "Emitter",
    "FactorialMomentVector",
    "GVector",
    "GaussianFit",
    "MAX_ORDER",
    "MapStack",
    "PSFModel",
    "PixelStatistics",
    "PixelTally",
    "PowerSumExpansion",
    "RawScan",
    "ScanGrid",
    "Scene",
    "SceneFormatError",
    "TwoPeakFit",
    "abbe_limit",
    "bundled_scene_names",
    "bundled_scene_path",
    "certify_two_emitter",
    "derive_pixel_seed",
    "detection_probability",
    "elementary_symmetric",
    "error_propagate",
    "estimate_from_counts",
    "estimate_from_tree",
    "estimate_scan",
    "evaluate_power_sum",
    "factorial_moments_bernoulli",
    "factorial_moments_with_background",
    "fit_gaussian_1d",
    "fit_two_gaussians_1d",
    "g_from_moments",
    "load_scene",
    "narrowing_report",
    "partitions_of",
    "photon_count_distribution",
    "power_sum_expansion",
    "power_sum_partials",
    "reconstruct",
    "scan_exact",
    "scene_fingerprint",
    "simulate_pixel",
    "simulate_scan",
    "tree_click_distribution",
    "two_emitter_power_sum",
    "write_coefficient_table",
]
