"""Default verification suites: fixed grids plus CSV/JSON emission.

These runners bundle the individual checks into the configurations used by
the command-line tool and the acceptance tests, and serialize results as a
CheckReport CSV plus a JSON summary {n_checks, n_pass, worst_rel_error}.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .checks import (
    CheckReport,
    bound_suite,
    discretization_study,
    marginal_equivalence,
    martingale_quadrature_reference,
    martingale_residual,
    relative_error_ratio,
    theorem1_decrement,
)
from .harness import write_csv, write_json
from .mixture import ClassConditionalModel, classifier_log_prob, containment_radius, NoiseLevel
from .samplers import run_coupled_trials
from .schedules import build_schedule
from .stats import kahan_mean

__all__ = [
    "MARTINGALE_GRID",
    "THEOREM1_CONFIGS",
    "martingale_suite",
    "theorem1_suite",
    "bounds_grid",
    "random_bound_points",
    "bounds_suite",
    "equivalence_suite",
    "convergence_suite",
    "ratio_suite",
    "write_reports",
    "summarize_reports",
]

# 25 (t, tau, x) configurations: five forward times, five states, tau = t/2.
MARTINGALE_GRID = tuple(
    (t, t / 2.0, x)
    for t in (0.2, 0.35, 0.5, 0.7, 0.9)
    for x in (-2.0, -0.8, 0.0, 0.8, 2.0)
)

# Ten (w, t, y) decrement configurations plus two exact-zero references.
THEOREM1_CONFIGS = tuple(
    [(w, t, 1.2) for w in (0.5, 1.0, 2.0) for t in (0.3, 0.5, 0.7)] + [(2.0, 0.5, -0.7)]
)
THEOREM1_ZERO_CONFIGS = ((0.0, 0.5, 1.2), (2.0, 0.5, 0.0))


def martingale_suite(
    model: ClassConditionalModel,
    c: int,
    n_samples: int,
    seed: int,
    grid=MARTINGALE_GRID,
    quadrature: bool = True,
) -> list[CheckReport]:
    """Monte Carlo martingale residuals over the grid, plus quadrature cross-checks.

    The quadrature rows verify, independently of the sampling path, that the
    trapezoid integral of the posterior-weighted reciprocal matches the
    analytic reciprocal to 1e-6 relative.
    """
    reports = []
    for i, (t, tau, x) in enumerate(grid):
        reports.append(
            martingale_residual(model, c, t, tau, np.atleast_1d(x), n_samples, seed + i)
        )
        if quadrature and model.dimension == 1:
            ref = reports[-1].reference
            quad = martingale_quadrature_reference(model, c, t, tau, np.atleast_1d(x))
            abs_err = abs(quad - ref)
            tol = 1e-6 * abs(ref)
            reports.append(
                CheckReport(
                    check_name="martingale_quadrature",
                    point={"c": c, "t": t, "tau": tau, "x": [float(x)]},
                    estimate=quad,
                    reference=ref,
                    abs_error=abs_err,
                    rel_error=abs_err / abs(ref),
                    standard_error=0.0,
                    tolerance=tol,
                    passed=abs_err <= tol,
                    tolerance_rule="|quadrature - analytic| <= 1e-6*|analytic|",
                )
            )
    return reports


def theorem1_suite(
    model: ClassConditionalModel,
    c: int,
    dt: float,
    n_replicates: int,
    seed: int,
    configs=THEOREM1_CONFIGS,
    zero_configs=THEOREM1_ZERO_CONFIGS,
) -> list[CheckReport]:
    reports = []
    for i, (w, t, y) in enumerate(tuple(configs) + tuple(zero_configs)):
        reports.append(
            theorem1_decrement(model, c, w, t, np.atleast_1d(y), dt, n_replicates, seed + i)
        )
    return reports


def bounds_grid(n_y: int = 20, n_t: int = 10) -> list[tuple[np.ndarray, float]]:
    """Deterministic (y, t) grid: y in [-6, 6], t (= alpha_bar) in [0.05, 0.95]."""
    ys = np.linspace(-6.0, 6.0, n_y)
    ts = np.linspace(0.05, 0.95, n_t)
    return [(np.array([y]), float(t)) for t in ts for y in ys]


def random_bound_points(n: int, seed: int, dimension: int = 1) -> list[tuple[np.ndarray, float]]:
    rng = np.random.default_rng(seed)
    pts = []
    for _ in range(n):
        y = rng.uniform(-4.0, 4.0, size=dimension)
        t = float(rng.uniform(0.05, 0.99))
        pts.append((y, t))
    return pts


def bounds_suite(
    model: ClassConditionalModel,
    c: int,
    seed: int,
    grid=None,
    n_random: int = 100,
) -> list[CheckReport]:
    """Bound checks on the deterministic grid plus the gradient identity at random points."""
    radius = containment_radius(model)
    grid = bounds_grid() if grid is None else grid
    reports = bound_suite(model, c, grid, radius=radius)
    random_pts = random_bound_points(n_random, seed, model.dimension)
    extra = bound_suite(model, c, random_pts, radius=radius)
    reports.extend(r for r in extra if r.check_name == "inverse_prob_gradient_identity")
    return reports


def equivalence_suite(
    model: ClassConditionalModel,
    c: int,
    checkpoints: Sequence[float],
    dt: float,
    n_paths: int,
    seed: int,
) -> list[CheckReport]:
    return marginal_equivalence(model, c, tuple(checkpoints), dt, n_paths, seed)


def convergence_suite(
    model: ClassConditionalModel,
    c: int,
    w_list: Sequence[float],
    N_list: Sequence[int],
    trials: int,
    seed: int,
) -> list[dict]:
    rows = []
    for w in w_list:
        rows.extend(discretization_study(model, c, w, N_list, trials, seed))
    return rows


def ratio_suite(
    model: ClassConditionalModel,
    c: int,
    w_grid: Sequence[float],
    tv_budget: float,
    N: int,
    trials: int,
    seed: int,
    bootstrap: int = 200,
) -> list[CheckReport]:
    """Discretization correction ratios across w, checked for a non-increasing trend.

    Each row's pass rule is one-sided: the ratio may not exceed the previous
    w's ratio by more than twice the pooled bootstrap standard error.
    """
    schedule = build_schedule(N)
    reports = []
    prev: tuple[float, float] | None = None
    for w in w_grid:
        ct = run_coupled_trials(model, schedule, w, c, master_seed=seed, n_trials=trials)
        ratio = relative_error_ratio(ct, tv_budget)
        inv_g = np.exp(-ct.log_p_guided)
        inv_b = np.exp(-ct.log_p_baseline)
        brng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
        boots = np.empty(bootstrap)
        n = inv_g.size
        k = max(math.ceil(tv_budget * n), 1)
        for b in range(bootstrap):
            idx = brng.integers(0, n, n)
            g, bl = inv_g[idx], inv_b[idx]
            denom = np.mean(bl) - np.mean(g)
            if denom <= 0 or tv_budget == 0.0:
                boots[b] = 0.0 if tv_budget == 0.0 else np.nan
                continue
            tau = np.sort(g)[::-1][k - 1]
            boots[b] = np.mean((g - 1.0) * (g > tau)) / denom
        se = float(np.nanstd(boots, ddof=1))
        if prev is None:
            violation, tol = 0.0, 0.0
        else:
            violation = max(0.0, ratio - prev[0])
            tol = 2.0 * math.sqrt(se**2 + prev[1] ** 2)
        reports.append(
            CheckReport(
                check_name="relative_error_ratio_trend",
                point={
                    "w": float(w), "tv_budget": tv_budget, "N": N, "trials": trials,
                    "ratio": ratio, "bootstrap_se": se,
                },
                estimate=violation,
                reference=0.0,
                abs_error=violation,
                rel_error=float("nan"),
                standard_error=se,
                tolerance=tol,
                passed=violation <= tol,
                tolerance_rule="ratio(w_i) - ratio(w_{i-1}) <= 2*pooled bootstrap se (one-sided)",
            )
        )
        prev = (ratio, se)
    return reports


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

REPORT_HEADER = [
    "check_name", "point", "estimate", "reference", "abs_error", "rel_error",
    "standard_error", "tolerance", "pass", "tolerance_rule",
]


def summarize_reports(reports: Sequence[CheckReport]) -> dict:
    rels = [r.rel_error for r in reports if math.isfinite(r.rel_error)]
    return {
        "n_checks": len(reports),
        "n_pass": sum(1 for r in reports if r.passed),
        "worst_rel_error": max(rels) if rels else None,
    }


def write_reports(reports: Sequence[CheckReport], out_dir, stem: str) -> tuple[str, str]:
    """Write <stem>.csv (one row per CheckReport) and <stem>.json (the summary)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(
        out_dir / f"{stem}.csv",
        REPORT_HEADER,
        [
            [
                r.check_name, r.point, r.estimate, r.reference, r.abs_error, r.rel_error,
                r.standard_error, r.tolerance, r.passed, r.tolerance_rule,
            ]
            for r in reports
        ],
    )
    json_path = write_json(out_dir / f"{stem}.json", summarize_reports(reports))
    return csv_path, json_path
