"""Discrete noise schedules and their continuous-time mapping.

Two constructors are provided: the recurrence schedule whose signal level
grows backward from a terminal value ``N**(-c0)`` with relative step
``c1 * (1 - alpha_bar) * log(N) / N``, and a conventional linear-beta
schedule.  Both expose per-step ``beta`` and cumulative ``alpha_bar`` arrays
indexed n = 1..N, plus the mapping to a NoiseLevel via t = 1 - alpha_bar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mixture import NoiseLevel

__all__ = ["Schedule", "build_schedule", "linear_beta_schedule", "level_of"]

_ALPHA_BAR_CAP = 1.0 - 1e-12


@dataclass(frozen=True)
class Schedule:
    """An N-step noise schedule.

    ``alpha_bar[n-1]`` and ``beta[n-1]`` hold the values for step n.
    ``alpha_bar_prev`` is the predecessor value used to define beta at n = 1;
    the arrays are mutually consistent through
    ``alpha_bar[n] = alpha_bar_prev * prod_{k<=n} (1 - beta[k])``.
    For the linear constructor c0 and c1 are absent (None).
    """

    N: int
    c0: float | None
    c1: float | None
    alpha_bar: np.ndarray
    beta: np.ndarray
    alpha_bar_prev: float = field(default=1.0)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if ab.shape != (self.N,) or b.shape != (self.N,):
            raise ValueError("alpha_bar and beta must both have length N")
        if np.any(ab <= 0.0) or np.any(ab >= 1.0):
            raise ValueError("every alpha_bar must lie in (0, 1)")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(b <= 0.0) or np.any(b >= 1.0):
            raise ValueError("every beta must lie in (0, 1)")
        ab.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "beta", b)


def build_schedule(N: int, c0: float = 2.0, c1: float = 4.0) -> Schedule:
    """Construct the recurrence schedule with terminal level ``N**(-c0)``.

    Proceeds from n = N downward via
    ``alpha_bar[n-1] = alpha_bar[n] * (1 + c1 * (1 - alpha_bar[n]) * log(N) / N)``.
    Construction fails if any interior level would reach 1 - 1e-12; the
    predecessor value defining beta at n = 1 is capped there.
    """
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    if c0 <= 0.0 or c1 <= 0.0:
        raise ValueError("c0 and c1 must be > 0")
    growth = c1 * math.log(N) / N
    alpha_bar = np.empty(N)
    alpha_bar[N - 1] = N ** (-c0)
    for n in range(N - 1, 0, -1):
        ab = alpha_bar[n]
        nxt = ab + growth * ab * (1.0 - ab)
        if nxt >= _ALPHA_BAR_CAP:
            raise ValueError(
                f"recurrence pushes alpha_bar past {_ALPHA_BAR_CAP} at n={n}; "
                f"use a smaller c1 (got c1={c1})"
            )
        alpha_bar[n - 1] = nxt
    a1 = alpha_bar[0]
    alpha_bar_prev = min(_ALPHA_BAR_CAP, a1 + growth * a1 * (1.0 - a1))
    beta = 1.0 - alpha_bar / np.concatenate(([alpha_bar_prev], alpha_bar[:-1]))
    return Schedule(N=N, c0=c0, c1=c1, alpha_bar=alpha_bar, beta=beta, alpha_bar_prev=alpha_bar_prev)


def linear_beta_schedule(N: int, beta_min: float, beta_max: float) -> Schedule:
    """Schedule with beta linear in n and alpha_bar the running product of (1 - beta)."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, N)
    alpha_bar = np.cumprod(1.0 - beta)
    return Schedule(N=N, c0=None, c1=None, alpha_bar=alpha_bar, beta=beta, alpha_bar_prev=1.0)


def level_of(schedule: Schedule, n: int) -> NoiseLevel:
    """NoiseLevel of step n (1-indexed)."""
    if not 1 <= n <= schedule.N:
        raise ValueError(f"step n={n} out of range [1, {schedule.N}]")
    return NoiseLevel(alpha_bar=float(schedule.alpha_bar[n - 1]))
