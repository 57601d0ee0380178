"""Super-resolved map layers from mean and correlation layers.

``reconstruct`` turns the per-pixel (mean, g2..gk) values of a MapStack
into the order-k emitter power sum, the quantity whose spatial profile is
sqrt(k) narrower than the intensity image.  Two modes:

* ``standard``     -- uses every order g2..gk.
* ``two_emitter``  -- uses only g2, substituting the exact closure
  g_j = 0 for j >= 3 that holds for a pair of single-photon emitters.
  The substitution is user-asserted; ``certify_two_emitter`` checks it
  against the data (g3 statistically compatible with zero).

Noisy estimates can drive the polynomial negative; the raw signed value
is kept as the primary product (clamping would bias downstream fits) and
a clamped companion layer ``sr<k>_pos`` is added for rendering.

``error_propagate`` attaches first-order (delta-method) standard errors,
treating the per-pixel mean and g estimates as independent.  That ignores
their correlations (they come from the same pulses), so it is an
approximation; its accuracy is checked against seed ensembles in the test
suite.
"""

from __future__ import annotations

import math

import numpy as np

from .algebra import (
    MAX_ORDER,
    GVector,
    evaluate_power_sum,
    power_sum_expansion,
    power_sum_partials,
    two_emitter_power_sum,
)
from .mapstack import MapStack

__all__ = [
    "MODES",
    "reconstruct",
    "error_propagate",
    "certify_two_emitter",
]

MODES = ("standard", "two_emitter")


def _required_g_layers(k: int, mode: str) -> list[str]:
    if mode == "standard":
        return [f"g{j}" for j in range(2, k + 1)]
    return ["g2"]


def _check_inputs(stack: MapStack, k: int, mode: str,
                  layers: list[str]) -> None:
    if not 2 <= k <= MAX_ORDER:
        raise ValueError(f"order must lie in 2..{MAX_ORDER}, got {k}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    missing = [name for name in layers if not stack.has_layer(name)]
    if missing:
        raise ValueError(f"map stack lacks required layers {missing}; "
                         f"have {stack.layer_names()}")


def _defined_mask(stack: MapStack, layers: list[str]) -> np.ndarray:
    mask = stack.mask("intensity").copy()
    for name in layers:
        mask &= stack.mask(name)
    return mask


def reconstruct(stack: MapStack, k: int, mode: str = "standard") -> MapStack:
    """Add ``sr<k>`` (signed) and ``sr<k>_pos`` (clamped) layers in place.

    Pixels where any required input layer is undefined stay undefined.
    Returns the stack for chaining.
    """
    g_layers = _required_g_layers(k, mode)
    _check_inputs(stack, k, mode, ["intensity"] + g_layers)
    mask = _defined_mask(stack, g_layers)
    intensity = stack.layer("intensity")
    g_values = [stack.layer(name) for name in g_layers]
    out = np.zeros(stack.grid.shape)
    expansion = power_sum_expansion(k)
    for row, col in zip(*np.nonzero(mask)):
        mean = intensity[row, col]
        if mode == "two_emitter":
            out[row, col] = two_emitter_power_sum(mean, g_values[0][row, col], k)
        else:
            g = GVector((1.0,) + tuple(layer[row, col] for layer in g_values))
            out[row, col] = evaluate_power_sum(expansion, mean, g)
    stack.add_layer(f"sr{k}", out, mask)
    stack.add_layer(f"sr{k}_pos", np.maximum(out, 0.0), mask)
    return stack


def error_propagate(stack: MapStack, k: int, mode: str = "standard") -> MapStack:
    """Add the delta-method standard error layer ``se_sr<k>`` in place.

    var(sr_k) = (d sr_k/d mean)^2 var(mean)
              + sum_j (d sr_k/d g_j)^2 var(g_j)

    with derivatives evaluated at the estimates, inputs treated as
    independent.  In two_emitter mode only mean and g2 carry variance.
    """
    g_layers = _required_g_layers(k, mode)
    se_layers = ["se_intensity"] + [f"se_{name}" for name in g_layers]
    _check_inputs(stack, k, mode, ["intensity"] + g_layers + se_layers)
    mask = _defined_mask(stack, g_layers + se_layers)
    intensity = stack.layer("intensity")
    se_intensity = stack.layer("se_intensity")
    g_values = [stack.layer(name) for name in g_layers]
    g_errors = [stack.layer(f"se_{name}") for name in g_layers]
    orders = list(range(2, k + 1)) if mode == "standard" else [2]
    out = np.zeros(stack.grid.shape)
    expansion = power_sum_expansion(k)
    for row, col in zip(*np.nonzero(mask)):
        mean = intensity[row, col]
        gvec = [1.0] + [0.0] * (k - 1)
        for j, layer in zip(orders, g_values):
            gvec[j - 1] = layer[row, col]
        d_mean, d_g = power_sum_partials(expansion, mean, GVector(tuple(gvec)))
        variance = (float(d_mean) * se_intensity[row, col]) ** 2
        for j, err_layer in zip(orders, g_errors):
            variance += (float(d_g[j]) * err_layer[row, col]) ** 2
        out[row, col] = math.sqrt(variance)
    stack.add_layer(f"se_sr{k}", out, mask)
    return stack


def certify_two_emitter(stack: MapStack, region: np.ndarray | None = None,
                        z: float = 3.0) -> bool:
    """True when g3 is statistically compatible with zero over the region.

    Checks |g3| <= z * se_g3 on every pixel of ``region`` (default: all
    pixels where g3 is defined).  Certifying an exact stack, where se
    layers do not exist, succeeds when g3 is identically zero on the
    region.  Returns False when the region holds no defined pixels: an
    empty region certifies nothing.
    """
    if not stack.has_layer("g3"):
        raise ValueError("certification needs a g3 layer")
    mask = stack.mask("g3").copy()
    if region is not None:
        mask &= np.asarray(region, dtype=bool)
    if not mask.any():
        return False
    g3 = stack.layer("g3")[mask]
    if stack.has_layer("se_g3"):
        limit = z * stack.layer("se_g3")[mask]
    else:
        limit = np.zeros_like(g3)
    return bool(np.all(np.abs(g3) <= limit))
