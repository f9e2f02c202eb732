"""Privacy accounting for repeated executions of the padded matching.

The privacy-loss distribution (PLD) of one execution has finite points
``2 ln(C(tau, z) / C(tau, z + 1))`` with mass ``C(tau, z)^2 / C(2 tau, tau)``
for ``z < tau`` plus an infinite-loss atom of mass ``1 / C(2 tau, tau)``.
``k`` executions compose by convolving the finite part ``k`` times; the FFT
estimate rounds every loss up to the grid so it never undershoots.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import mpmath
import numpy as np

DEFAULT_NX = 2**16
MAX_DX = 0.05
# guard band between the largest loss and the window edge, see FftGrid
WINDOW_GUARD = 0.1
BRUTE_MAX_TAU = 64
BRUTE_MAX_K = 6


class AccountantError(ValueError):
    pass


def _log_comb(n: int, r: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)


@dataclass(frozen=True)
class Pld:
    tau: int
    support: np.ndarray
    masses: np.ndarray
    infinity_mass: float

    @property
    def total_mass(self) -> float:
        return float(math.fsum(self.masses)) + self.infinity_mass


def build_pld(tau: int) -> Pld:
    if tau < 1:
        raise AccountantError("tau must be >= 1")
    log_total = _log_comb(2 * tau, tau)
    z = np.arange(tau)
    # C(tau, z) / C(tau, z + 1) = (z + 1) / (tau - z)
    support = 2.0 * (np.log(z + 1.0) - np.log(tau - z * 1.0))
    masses = np.array([math.exp(2 * _log_comb(tau, int(k)) - log_total) for k in z])
    return Pld(tau, support, masses, math.exp(-log_total))


@dataclass(frozen=True)
class FftGrid:
    """Discretisation window ``[-W, W)`` with ``n_x`` bins of width ``dx``.

    ``W`` is the k-fold leakage bound ``(4k - 2) ln tau`` (at least 1.0) plus a
    small guard band: for ``k = 1`` the largest loss sits exactly on the bound,
    and rounding it up must not push it past the last bin.
    """

    window: float
    n_x: int
    dx: float

    @classmethod
    def for_composition(cls, tau: int, k: int, n_x: int = DEFAULT_NX) -> "FftGrid":
        if n_x < 4 or n_x & (n_x - 1):
            raise AccountantError("n_x must be a power of two")
        w = max((4 * k - 2) * math.log(tau), 1.0) + WINDOW_GUARD
        dx = 2 * w / n_x
        if dx > MAX_DX:
            raise AccountantError(f"grid too coarse (dx={dx:.3g} > {MAX_DX}); increase n_x")
        return cls(w, n_x, dx)

    def values(self) -> np.ndarray:
        return -self.window + np.arange(self.n_x) * self.dx


@dataclass(frozen=True)
class CompositionResult:
    delta: float
    tau: int
    k: int
    eps: float
    grid: FftGrid


def _delta_inf(tau: int, k: int) -> float:
    # 1 - (1 - p)^k without cancellation
    return -math.expm1(k * math.log1p(-math.exp(-_log_comb(2 * tau, tau))))


def estimate_delta_fft(tau: int, k: int, eps: float, n_x: int = DEFAULT_NX) -> CompositionResult:
    if tau < 1 or k < 1 or eps < 0:
        raise AccountantError("need tau >= 1, k >= 1, eps >= 0")
    grid = FftGrid.for_composition(tau, k, n_x)
    pld = build_pld(tau)
    w, dx = grid.window, grid.dx

    vec = np.zeros(n_x)
    bins = np.ceil((w + pld.support) / dx).astype(np.int64)
    np.add.at(vec, np.clip(bins, 0, n_x - 1), pld.masses)

    half = n_x // 2
    # halfswap puts loss 0 at index 0 so the circular convolution adds losses
    spectrum = np.fft.rfft(np.roll(vec, -half))
    composed = np.roll(np.fft.irfft(spectrum**k, n_x), half)
    np.maximum(composed, 0.0, out=composed)

    start = math.ceil((eps + w) / dx)
    if start < n_x:
        idx = np.arange(start, n_x)
        weights = -np.expm1(eps + w - idx * dx)
        tail = math.fsum(weights * composed[start:])
    else:
        tail = 0.0
    delta = min(1.0, _delta_inf(tau, k) + tail)
    return CompositionResult(delta, tau, k, eps, grid)


def kfold_support(tau: int, k: int) -> dict[Fraction, Fraction]:
    """Exact k-fold convolution of the finite PLD part.

    Keys are the likelihood ratios ``prod (z_i + 1) / (tau - z_i)`` (the loss
    is ``2 ln`` of the key), values the exact probability masses.
    """
    if tau > BRUTE_MAX_TAU or k > BRUTE_MAX_K:
        raise AccountantError(f"brute force limited to tau <= {BRUTE_MAX_TAU}, k <= {BRUTE_MAX_K}")
    total = math.comb(2 * tau, tau)
    single = {Fraction(z + 1, tau - z): Fraction(math.comb(tau, z) ** 2, total) for z in range(tau)}
    dist = {Fraction(1): Fraction(1)}
    for _ in range(k):
        nxt: dict[Fraction, Fraction] = {}
        for r1, m1 in dist.items():
            for r2, m2 in single.items():
                key = r1 * r2
                nxt[key] = nxt.get(key, 0) + m1 * m2
        dist = nxt
    return dist


def brute_force_delta(tau: int, k: int, eps: float) -> float:
    if tau < 1 or k < 1 or eps < 0:
        raise AccountantError("need tau >= 1, k >= 1, eps >= 0")
    dist = kfold_support(tau, k)
    total = math.comb(2 * tau, tau)
    with mpmath.workdps(40 + len(str(total)) * k):
        e_eps = mpmath.exp(mpmath.mpf(eps))
        acc = 1 - (1 - mpmath.mpf(1) / total) ** k
        for ratio, mass in dist.items():
            sq = mpmath.mpf(ratio.numerator) ** 2 / mpmath.mpf(ratio.denominator) ** 2
            if sq > e_eps:  # loss 2 ln(ratio) > eps
                acc += (1 - e_eps / sq) * mpmath.mpf(mass.numerator) / mass.denominator
        return float(acc)


def find_min_tau(eps: float, delta: float, k: int = 1, n_x: int = DEFAULT_NX) -> int:
    """Smallest ``tau`` whose k-fold FFT estimate is at most ``delta``.

    Doubling search for an upper bound, then bisection; the returned value
    satisfies ``estimate(tau) <= delta < estimate(tau - 1)``.
    """
    if not 0 < delta < 1 or eps < 0 or k < 1:
        raise AccountantError("need eps >= 0, 0 < delta < 1, k >= 1")

    def estimate(tau: int) -> float:
        return estimate_delta_fft(tau, k, eps, n_x).delta

    hi = 1
    while estimate(hi) > delta:
        hi *= 2
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi + 1) // 2
        if estimate(mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi


def delta_curve(tau: int, k: int, eps_values, n_x: int = DEFAULT_NX) -> list[dict]:
    return [{"epsilon": float(e), "delta": estimate_delta_fft(tau, k, float(e), n_x).delta}
            for e in eps_values]
