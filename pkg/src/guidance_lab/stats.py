"""Small statistical helpers shared by the checks and the experiment harness."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["kahan_mean", "wilson_interval", "ks_statistic"]


def kahan_mean(values) -> tuple[float, float]:
    """Compensated mean and its standard error, summing in array order.

    The running sum uses Kahan compensation so that heavy-tailed values
    (reciprocal probabilities can be astronomically large) lose as little
    as possible to cancellation, and so that the result is independent of
    how trials were batched.
    """
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    if n == 0:
        raise ValueError("kahan_mean needs at least one value")
    total = 0.0
    comp = 0.0
    for v in values:
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
    mean = total / n
    if n == 1:
        return mean, float("nan")
    var = float(np.sum((values - mean) ** 2)) / (n - 1)
    return mean, math.sqrt(var / n)


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion k/n.

    Behaves sensibly near 0 and 1, where the Wald interval degenerates.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    phat = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (phat + z2 / (2 * n)) / denom
    half = z * math.sqrt(phat * (1.0 - phat) / n + z2 / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic (max CDF distance)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))
