"""Independent closed forms and reference oracles used by the tests.

These are deliberately written as direct transcriptions of the hand-derived
formulas for the bundled two-class model (class 0 standard normal, class 1
an equal pair of unit Gaussians at +/-1, equal priors), independent of the
library's generic log-sum-exp code paths.
"""

import numpy as np


def closed_conditional_score(alpha_bar, x):
    """Score of class 1 noised to alpha_bar: -x + sqrt(ab) * tanh(sqrt(ab) * x)."""
    r = np.sqrt(alpha_bar)
    e = np.exp(-2.0 * r * x)
    return -x + r * (1.0 - e) / (1.0 + e)


def closed_marginal_score(alpha_bar, x):
    r = np.sqrt(alpha_bar)
    e = np.exp(-2.0 * r * x)
    return -x + r * (1.0 - e) / (1.0 + e + 2.0 * np.exp(alpha_bar / 2.0 - r * x))


def closed_classifier_prob(alpha_bar, x):
    """Posterior probability of class 1 at noise level alpha_bar."""
    r = np.sqrt(alpha_bar)
    e = np.exp(-2.0 * r * x)
    return (1.0 + e) / (1.0 + e + 2.0 * np.exp(alpha_bar / 2.0 - r * x))


def trapezoid(f, lo, hi, nodes):
    grid = np.linspace(lo, hi, nodes)
    return np.trapezoid(f(grid), grid)


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2.0 * h)
    return g
