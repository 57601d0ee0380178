"""Exact photon-counting statistics.

Factorial moments, normalized autocorrelations g^(k), elementary symmetric
polynomials, and the partition-indexed expansion that turns an intensity map
plus g^(2..k) maps into the power sum sum_a P_a^k of the per-emitter
detection probabilities (the quantity whose Gaussian profile is sqrt(k)
narrower than the intensity).

Expansion coefficients are exact rationals obtained from Newton's identities
relating power sums to elementary symmetric polynomials.  Floating point
enters only when an expansion is evaluated on numeric data: evaluation
converts its inputs to rationals (exact for floats), accumulates exactly and
rounds once on return, so ill-conditioned high-order cancellations do not
lose precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

__all__ = [
    "MAX_ORDER",
    "DarkPixelError",
    "Partition",
    "partitions_of",
    "PowerSumExpansion",
    "FactorialMomentVector",
    "GVector",
    "elementary_symmetric",
    "factorial_moments_bernoulli",
    "factorial_moments_with_background",
    "g_from_moments",
    "power_sum_expansion",
    "evaluate_power_sum",
    "power_sum_partials",
    "two_emitter_power_sum",
    "coefficient_table_rows",
    "write_coefficient_table",
]

# Highest supported correlation order.  8! sized factors keep the rational
# coefficients small; orders above this are rejected rather than guessed at.
MAX_ORDER = 8

# A partition of k: non-increasing tuple of positive ints summing to k.
Partition = tuple[int, ...]


class DarkPixelError(ValueError):
    """Raised when g^(k) is requested for a state with zero mean photon number."""


def partitions_of(k: int) -> list[Partition]:
    """Integer partitions of k, reverse-lexicographic: (k,) first, (1,)*k last.

    The order is deterministic and is the canonical serialization order for
    coefficient tables.
    """
    if k < 0:
        raise ValueError(f"partition order must be >= 0, got {k}")
    if k == 0:
        return [()]
    out: list[Partition] = []

    def extend(prefix: list[int], remaining: int, cap: int) -> None:
        if remaining == 0:
            out.append(tuple(prefix))
            return
        for part in range(min(cap, remaining), 0, -1):
            prefix.append(part)
            extend(prefix, remaining - part, part)
            prefix.pop()

    extend([], k, k)
    return out


@dataclass(frozen=True)
class PowerSumExpansion:
    """Exact expansion of sum_a P_a^k over the partitions of k.

    ``terms`` maps each partition (j_1 >= j_2 >= ... >= j_l, sum = order) to
    the rational coefficient of the product g^(j_1)*...*g^(j_l); parts equal
    to 1 contribute the factor g^(1) = 1.  The full value is
    mean_n**order * sum(coeff * product of g factors).
    """

    order: int
    terms: Mapping[Partition, Fraction]

    def __post_init__(self) -> None:
        expected = partitions_of(self.order)
        if list(self.terms.keys()) != expected:
            raise ValueError("expansion terms must cover the partitions of "
                             f"{self.order} in reverse-lexicographic order")


@dataclass(frozen=True)
class FactorialMomentVector:
    """Falling-factorial moments F_k = <N(N-1)...(N-k+1)> for k = 1..K.

    Values may be floats or exact rationals; arithmetic downstream preserves
    whichever is supplied.
    """

    moments: tuple

    def __post_init__(self) -> None:
        if len(self.moments) < 1:
            raise ValueError("need at least F_1")
        if any(m < 0 for m in self.moments):
            raise ValueError("factorial moments must be non-negative")

    @property
    def order(self) -> int:
        return len(self.moments)

    def __getitem__(self, k: int):
        """F_k, indexed by moment order (1-based)."""
        if not 1 <= k <= self.order:
            raise IndexError(f"moment order {k} outside 1..{self.order}")
        return self.moments[k - 1]


@dataclass(frozen=True)
class GVector:
    """Normalized autocorrelations g^(1)..g^(K); g^(1) is identically 1."""

    values: tuple

    def __post_init__(self) -> None:
        if len(self.values) < 1:
            raise ValueError("need at least g^(1)")
        if self.values[0] != 1:
            raise ValueError("g^(1) must equal 1 exactly")
        if any(v < 0 for v in self.values):
            raise ValueError("g values must be non-negative")

    @property
    def order(self) -> int:
        return len(self.values)

    def __getitem__(self, k: int):
        """g^(k), indexed by correlation order (1-based)."""
        if not 1 <= k <= self.order:
            raise IndexError(f"correlation order {k} outside 1..{self.order}")
        return self.values[k - 1]


def elementary_symmetric(probs: Sequence, k: int) -> list:
    """Elementary symmetric polynomials e_0..e_k of detection probabilities.

    e_j is the sum over all j-subsets of distinct products.  Computed by the
    stable one-element-at-a-time recurrence, O(n*k); exact when ``probs`` are
    rationals.
    """
    if k < 0:
        raise ValueError(f"order must be >= 0, got {k}")
    for p in probs:
        if not 0 <= p <= 1:
            raise ValueError(f"detection probability {p!r} outside [0, 1]")
    e = [0] * (k + 1)
    e[0] = 1
    count = 0
    for p in probs:
        count += 1
        for j in range(min(count, k), 0, -1):
            e[j] = e[j] + p * e[j - 1]
    return e


def factorial_moments_bernoulli(probs: Sequence, K: int) -> FactorialMomentVector:
    """Factorial moments of a sum of independent 0/1 photon sources.

    F_k = k! * e_k(probs); in particular F_k = 0 for k exceeding the number
    of sources (at most one photon each).
    """
    if K < 1:
        raise ValueError(f"need K >= 1, got {K}")
    e = elementary_symmetric(probs, K)
    return FactorialMomentVector(tuple(factorial(j) * e[j] for j in range(1, K + 1)))


def factorial_moments_with_background(probs: Sequence, background_mean,
                                      K: int) -> FactorialMomentVector:
    """Factorial moments of independent 0/1 sources plus Poisson background.

    Multiplies the truncated factorial-moment generating series in u = z - 1:
    each source contributes (1 + P*u), the background contributes
    sum_j b^j u^j / j!.  F_k is k! times the u^k coefficient of the product.
    """
    if K < 1:
        raise ValueError(f"need K >= 1, got {K}")
    if background_mean < 0:
        raise ValueError(f"background mean must be >= 0, got {background_mean}")
    coeffs = elementary_symmetric(probs, K)
    b = background_mean
    # Poisson factorial-moment series; stays exact for Fraction inputs.
    bg = [b ** j / factorial(j) for j in range(K + 1)]
    total = [0] * (K + 1)
    for i in range(K + 1):
        ci = coeffs[i]
        if ci == 0:
            continue
        for j in range(K + 1 - i):
            total[i + j] += ci * bg[j]
    return FactorialMomentVector(tuple(factorial(j) * total[j] for j in range(1, K + 1)))


def g_from_moments(F: FactorialMomentVector) -> GVector:
    """Normalized autocorrelations g^(k) = F_k / F_1^k; g^(1) is pinned to 1.

    Raises :class:`DarkPixelError` when F_1 = 0 (no photons, g undefined);
    map-building callers translate that into an undefined-pixel mask entry.
    """
    f1 = F[1]
    if f1 == 0:
        raise DarkPixelError("mean photon number is zero; g^(k) undefined")
    values = [1] + [F[k] / f1 ** k for k in range(2, F.order + 1)]
    return GVector(tuple(values))


# Internal polynomial representation for the symbolic derivation: a monomial
# is the non-increasing tuple of g-orders >= 2 it contains (empty = constant),
# a polynomial maps monomials to Fraction coefficients.  The mean-photon
# power is implicit: every term of the k-th expansion carries mean_n**k.

def _poly_mul(a: dict, b: dict) -> dict:
    out: dict[tuple, Fraction] = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            key = tuple(sorted(ma + mb, reverse=True))
            out[key] = out.get(key, Fraction(0)) + ca * cb
    return out


def _poly_axpy(acc: dict, scale: Fraction, poly: dict) -> None:
    for m, c in poly.items():
        acc[m] = acc.get(m, Fraction(0)) + scale * c


@lru_cache(maxsize=None)
def power_sum_expansion(k: int) -> PowerSumExpansion:
    """Exact rational coefficients expressing sum_a P_a^k via mean_n and g^(j).

    Newton's identity
    ``p_k = sum_{i=1}^{k-1} (-1)^(i-1) e_i p_(k-i) + (-1)^(k-1) k e_k``
    is applied recursively in a polynomial ring over g^(2)..g^(k), after
    substituting e_j = g^(j) mean_n^j / j!.  The result is keyed by the
    partitions of k: parts >= 2 name the g factors of a term, parts equal
    to 1 pad the partition weight (g^(1) = 1).

    The instance is cached and immutable; share it freely across threads.
    """
    if not 1 <= k <= MAX_ORDER:
        raise ValueError(f"order must be in 1..{MAX_ORDER}, got {k}")
    # e_j with the mean_n^j factor stripped (it is restored implicitly by
    # homogeneity: every product below has total weight k).
    e = {1: {(): Fraction(1)}}
    for j in range(2, k + 1):
        e[j] = {(j,): Fraction(1, factorial(j))}
    p: dict[int, dict] = {1: {(): Fraction(1)}}
    for m in range(2, k + 1):
        acc: dict[tuple, Fraction] = {}
        for i in range(1, m):
            _poly_axpy(acc, Fraction((-1) ** (i - 1)), _poly_mul(e[i], p[m - i]))
        _poly_axpy(acc, Fraction((-1) ** (m - 1) * m), e[m])
        p[m] = acc
    poly = p[k]
    terms = {}
    for part in partitions_of(k):
        monomial = tuple(j for j in part if j >= 2)
        terms[part] = poly[monomial]
    return PowerSumExpansion(order=k, terms=MappingProxyType(terms))


def _exact(value) -> Fraction:
    # Fraction() is exact for int, float and Fraction inputs alike.
    return value if isinstance(value, Fraction) else Fraction(value)


def evaluate_power_sum(expansion: PowerSumExpansion, mean_n, g: GVector) -> float:
    """Evaluate mean_n**k * sum(coeff * g-products) for the given expansion.

    Accumulation is exact (inputs are converted to rationals first); the
    single rounding step is the float conversion of the result.  For moments
    of an exact photon-number state this reproduces sum_a P_a^k to machine
    precision.
    """
    k = expansion.order
    if mean_n < 0:
        raise ValueError(f"mean photon number must be >= 0, got {mean_n}")
    if g.order < k:
        raise ValueError(f"need g up to order {k}, got order {g.order}")
    gx = {j: _exact(g[j]) for j in range(2, k + 1)}
    total = Fraction(0)
    for part, coeff in expansion.terms.items():
        term = coeff
        for j in part:
            if j >= 2:
                term *= gx[j]
        total += term
    return float(_exact(mean_n) ** k * total)


def power_sum_partials(expansion: PowerSumExpansion, mean_n,
                       g: GVector) -> tuple[float, dict[int, float]]:
    """Partial derivatives of :func:`evaluate_power_sum`.

    Returns (d/d mean_n, {j: d/d g^(j)}) evaluated at the given point, with
    the same exact-accumulation policy as the evaluation itself.  Feeds the
    first-order variance propagation of reconstructed maps.
    """
    k = expansion.order
    if mean_n < 0:
        raise ValueError(f"mean photon number must be >= 0, got {mean_n}")
    if g.order < k:
        raise ValueError(f"need g up to order {k}, got order {g.order}")
    mn = _exact(mean_n)
    gx = {j: _exact(g[j]) for j in range(2, k + 1)}
    poly_sum = Fraction(0)
    dg: dict[int, Fraction] = {j: Fraction(0) for j in range(2, k + 1)}
    for part, coeff in expansion.terms.items():
        mult: dict[int, int] = {}
        for j in part:
            if j >= 2:
                mult[j] = mult.get(j, 0) + 1
        base = coeff
        for j, m in mult.items():
            base *= gx[j] ** m
        poly_sum += base
        for j, m in mult.items():
            partial = coeff * m * gx[j] ** (m - 1)
            for jj, mm in mult.items():
                if jj != j:
                    partial *= gx[jj] ** mm
            dg[j] += partial
    mn_pow = mn ** k
    d_mean = float(k * mn ** (k - 1) * poly_sum) if k >= 1 else 0.0
    return d_mean, {j: float(mn_pow * dg[j]) for j in range(2, k + 1)}


def two_emitter_power_sum(mean_n, g2, k: int) -> float:
    """Order-k power sum assuming at most two emitters: g^(j) = 0 for j >= 3.

    With only two photon sources every correlation beyond the second order
    vanishes, so the order-k expansion collapses to a polynomial in g^(2)
    alone and arbitrarily high orders become measurable from g^(2).
    """
    if k < 2:
        raise ValueError(f"two-emitter mode needs k >= 2, got {k}")
    values = (1, g2) + (0,) * (k - 2)
    return evaluate_power_sum(power_sum_expansion(k), mean_n, GVector(values))


def coefficient_table_rows(orders: Iterable[int]) -> list[tuple[int, str, int, int]]:
    """Rows (k, dash-separated partition, numerator, denominator) for export."""
    rows = []
    for k in orders:
        expansion = power_sum_expansion(k)
        for part, coeff in expansion.terms.items():
            rows.append((k, "-".join(str(j) for j in part),
                         coeff.numerator, coeff.denominator))
    return rows


def write_coefficient_table(path, orders: Iterable[int] = range(2, MAX_ORDER + 1)) -> None:
    """Write the exact coefficient table as CSV: k, partition, numerator, denominator."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("k,partition,numerator,denominator\n")
        for k, part, num, den in coefficient_table_rows(orders):
            fh.write(f"{k},{part},{num},{den}\n")
