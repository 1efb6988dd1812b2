"""Statistical and numerical verification of the guidance identities.

Each check compares a Monte Carlo estimate against an independent reference
(closed form or quadrature) and reports the outcome as a CheckReport.  Pass
rules separate statistical noise from bias: Monte Carlo comparisons use
z standard errors, deterministic identities use explicit absolute
tolerances, and the one-step decrement check adds a Richardson-calibrated
discretization-bias term.  All checks are deterministic given their seed.

Conventions: the martingale check works in forward time (state at time t has
noise level alpha_bar = 1 - t); the continuous-time simulations work in
reverse-SDE time where the state at time t has level alpha_bar = t.  The
default simulation window is t in [0.01, 0.999], avoiding the dt/t blow-up
at the noise end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import ks_2samp

from .mixture import (
    ClassConditionalModel,
    NoiseLevel,
    classifier_log_prob,
    conditional_score,
    containment_radius,
    guidance_direction,
    log_density,
    marginal_score,
    noised_mixture,
    posterior_mixture,
    sample_mixture,
)
from .samplers import CoupledTrials, em_reverse_paths, run_coupled_trials, _em_step, _segment_steps
from .schedules import build_schedule
from .stats import kahan_mean, ks_statistic

__all__ = [
    "CheckReport",
    "NoImprovementError",
    "martingale_residual",
    "martingale_quadrature_reference",
    "theorem1_decrement",
    "improvement_integral",
    "bound_suite",
    "marginal_equivalence",
    "discretization_study",
    "relative_error_ratio",
    "DELTA_DEFAULT",
    "T_END_DEFAULT",
]

DELTA_DEFAULT = 0.01
T_END_DEFAULT = 0.999

QUAD_LO, QUAD_HI, QUAD_NODES = -12.0, 12.0, 200_000


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one check: estimate vs reference under a named pass rule.

    ``passed`` holds exactly when ``abs_error <= tolerance``, where
    ``tolerance`` is the evaluated value of ``tolerance_rule``.
    ``rel_error`` is NaN when the reference is zero.
    """

    check_name: str
    point: dict
    estimate: float
    reference: float
    abs_error: float
    rel_error: float
    standard_error: float
    tolerance: float
    passed: bool
    tolerance_rule: str

    def __post_init__(self):
        if self.passed != (self.abs_error <= self.tolerance):
            raise ValueError("passed flag must equal (abs_error <= tolerance)")


def _report(name, point, estimate, reference, se, tolerance, rule) -> CheckReport:
    abs_err = abs(estimate - reference)
    rel = abs_err / abs(reference) if reference != 0.0 else float("nan")
    return CheckReport(
        check_name=name,
        point=point,
        estimate=float(estimate),
        reference=float(reference),
        abs_error=float(abs_err),
        rel_error=float(rel),
        standard_error=float(se),
        tolerance=float(tolerance),
        passed=bool(abs_err <= tolerance),
        tolerance_rule=rule,
    )


class NoImprovementError(ValueError):
    """Guided mean reciprocal did not improve on the baseline; ratio undefined."""

    def __init__(self, mean_inv_baseline: float, mean_inv_guided: float):
        self.mean_inv_baseline = mean_inv_baseline
        self.mean_inv_guided = mean_inv_guided
        super().__init__(
            "mean reciprocal did not decrease under guidance: "
            f"baseline {mean_inv_baseline!r}, guided {mean_inv_guided!r}"
        )


# ---------------------------------------------------------------------------
# Martingale conservation of the reciprocal classifier probability
# ---------------------------------------------------------------------------


def martingale_residual(
    model: ClassConditionalModel,
    c: int,
    t: float,
    tau: float,
    x,
    n_samples: int,
    seed: int,
) -> CheckReport:
    """Check that 1/p(c|x) at forward time t equals the conditional mean of
    1/p(c|.) at the earlier time tau, averaging over the exact posterior of
    the earlier state.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    posterior = posterior_mixture(model, c, t, tau, x)
    rng = np.random.default_rng(seed)
    draws = sample_mixture(posterior, n_samples, rng)
    vals = np.exp(-classifier_log_prob(model, c, NoiseLevel.from_time(tau), draws))
    estimate = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n_samples))
    reference = float(np.exp(-classifier_log_prob(model, c, NoiseLevel.from_time(t), x)))
    floor = 1e-9 * (1.0 + abs(reference))
    return _report(
        "martingale_residual",
        {"c": c, "t": t, "tau": tau, "x": x.tolist(), "n_samples": n_samples, "seed": seed},
        estimate,
        reference,
        se,
        max(3.0 * se, floor),
        "max(3*se, 1e-9*(1+|ref|))",
    )


def martingale_quadrature_reference(
    model: ClassConditionalModel,
    c: int,
    t: float,
    tau: float,
    x,
    lo: float = QUAD_LO,
    hi: float = QUAD_HI,
    nodes: int = QUAD_NODES,
) -> float:
    """Trapezoid-quadrature value of the posterior-weighted mean of 1/p (d = 1).

    Independent of the Monte Carlo path: integrates the exact posterior
    density against the exact reciprocal classifier probability.
    """
    if model.dimension != 1:
        raise ValueError("quadrature reference is defined for d = 1 only")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    posterior = posterior_mixture(model, c, t, tau, x)
    grid = np.linspace(lo, hi, nodes)
    pdf = np.exp(log_density(posterior, grid[:, None]))
    inv_p = np.exp(-classifier_log_prob(model, c, NoiseLevel.from_time(tau), grid[:, None]))
    return float(np.trapezoid(pdf * inv_p, grid))


# ---------------------------------------------------------------------------
# One-step decrement of the mean reciprocal under guidance
# ---------------------------------------------------------------------------


def theorem1_decrement(
    model: ClassConditionalModel,
    c: int,
    w: float,
    t: float,
    y,
    dt: float,
    n_replicates: int,
    seed: int,
) -> CheckReport:
    """One-step decrement of E[1/p] along the guided reverse SDE vs its closed form.

    Estimate: phi_t(y) minus the replicate mean of phi_{t+dt} after a single
    Euler-Maruyama step from y at reverse time t.  Reference:
    ``(w/t) * phi_t(y) * ||s(y|c) - s(y)||^2 * dt`` with everything at level
    alpha_bar = t.  The pass tolerance is ``max(3*se, C_bias*dt^2)`` where
    C_bias comes from a Richardson comparison of the residual at dt and dt/2.
    """
    if not 0.0 < t < 1.0:
        raise ValueError(f"need 0 < t < 1, got t={t}")
    if dt <= 0.0 or t + dt > 1.0:
        raise ValueError(f"need dt > 0 and t + dt <= 1, got t={t}, dt={dt}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    ss = np.random.SeedSequence(seed)
    ss_main, ss_half = ss.spawn(2)

    def residual(h, n, ss_h):
        level = NoiseLevel(alpha_bar=t)
        phi_t = float(np.exp(-classifier_log_prob(model, c, level, y)))
        rng = np.random.default_rng(ss_h)
        z = rng.standard_normal((n, y.shape[0]))
        y_next = _em_step(model, c, w, t, h, y[None, :], z)
        phi_next = np.exp(-classifier_log_prob(model, c, NoiseLevel(alpha_bar=t + h), y_next))
        decs = phi_t - phi_next
        est = float(np.mean(decs))
        se = float(np.std(decs, ddof=1) / math.sqrt(n))
        gdir = guidance_direction(model, c, level, y)
        ref = (w / t) * phi_t * float(np.dot(gdir, gdir)) * h
        return est, se, ref

    est, se, ref = residual(dt, n_replicates, ss_main)
    est_h, _, ref_h = residual(dt / 2.0, max(n_replicates // 2, 1000), ss_half)
    d1 = est - ref
    d2 = est_h - ref_h
    c_bias = abs(4.0 * (d1 - d2) / (3.0 * dt * dt))
    tolerance = max(3.0 * se, c_bias * dt * dt)
    return _report(
        "theorem1_decrement",
        {
            "c": c,
            "w": w,
            "t": t,
            "y": y.tolist(),
            "dt": dt,
            "n_replicates": n_replicates,
            "seed": seed,
        },
        est,
        ref,
        se,
        tolerance,
        f"max(3*se, C_bias*dt^2), C_bias={c_bias:.6g} (Richardson dt vs dt/2)",
    )


def improvement_integral(
    model: ClassConditionalModel,
    c: int,
    w: float,
    dt: float,
    n_paths: int,
    seed: int,
    t_start: float = DELTA_DEFAULT,
    t_end: float = T_END_DEFAULT,
) -> tuple[float, float]:
    """Path-averaged total improvement integral along guided reverse paths.

    Accumulates ``(w/t) * (1/p) * ||s(.|c) - s||^2 * dt`` at the left endpoint
    of each Euler-Maruyama step, from t_start to t_end.  Returns the mean
    over paths and its standard error.  Exactly zero at w = 0.
    """
    rng = np.random.default_rng(seed)
    start = noised_mixture(model.class_mixtures[c], NoiseLevel(alpha_bar=t_start))
    y = sample_mixture(start, n_paths, rng)
    totals = np.zeros(n_paths)
    for t, h in _segment_steps(t_start, t_end, dt):
        level = NoiseLevel(alpha_bar=t)
        gdir = guidance_direction(model, c, level, y)
        normsq = np.einsum("md,md->m", gdir, gdir)
        inv_p = np.exp(-classifier_log_prob(model, c, level, y))
        totals += (w / t) * inv_p * normsq * h
        z = rng.standard_normal(y.shape)
        y = _em_step(model, c, w, t, h, y, z)
    estimate = float(np.mean(totals))
    se = float(np.std(totals, ddof=1) / math.sqrt(n_paths))
    return estimate, se


# ---------------------------------------------------------------------------
# Tail bounds and the gradient identity
# ---------------------------------------------------------------------------


def _fd_scaled_inverse_gradient(model, c, level, y, h=1e-5):
    """Central finite difference of exp(log p(c|y) - log p(c|y')) over y'.

    This is p(c|y) times the gradient of 1/p(c|.) at y, which the gradient
    identity predicts to equal the marginal minus the conditional score;
    the scaling keeps the computation finite even when 1/p is astronomically
    large.
    """
    d = y.shape[0]
    base = classifier_log_prob(model, c, level, y)
    grad = np.empty(d)
    for j in range(d):
        yp = y.copy()
        ym = y.copy()
        yp[j] += h
        ym[j] -= h
        gp = math.exp(base - classifier_log_prob(model, c, level, yp))
        gm = math.exp(base - classifier_log_prob(model, c, level, ym))
        grad[j] = (gp - gm) / (2.0 * h)
    return grad


def bound_suite(
    model: ClassConditionalModel,
    c: int,
    grid,
    radius: float | None = None,
    score_const: float = 10.0,
) -> list[CheckReport]:
    """Verify the classifier and score tail bounds plus the gradient identity.

    ``grid`` is an iterable of (y, t) pairs where t in (0, 1) is the noise
    level alpha_bar of the evaluation point.  Per point, four reports:

    * reciprocal classifier probability bounded by
      ``2/prior * exp((||y|| + sqrt(t) R)^2 / (2 (1-t)))`` (checked in log space),
    * marginal and conditional score norms bounded by
      ``C * ((||y|| + sqrt(t) R)/(1-t) + d/sqrt(1-t))`` with C = score_const,
    * the gradient identity: the finite-difference gradient of 1/p matches
      ``(1/p) * (marginal score - conditional score)`` to 1e-5 relative.

    Inequalities are encoded as estimate = violation magnitude vs reference 0.
    """
    c = int(c)
    if radius is None:
        radius = containment_radius(model)
    d = model.dimension
    log_prior = math.log(model.priors[c])
    reports = []
    for y, t in grid:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if not 0.0 < t < 1.0:
            raise ValueError(f"grid level t must be in (0, 1), got {t}")
        level = NoiseLevel(alpha_bar=t)
        norm_y = float(np.linalg.norm(y))
        point = {"c": c, "y": y.tolist(), "t": t, "R": radius}

        neg_log_p = -classifier_log_prob(model, c, level, y)
        rhs_log = math.log(2.0) - log_prior + (norm_y + math.sqrt(t) * radius) ** 2 / (2.0 * (1.0 - t))
        reports.append(
            _report(
                "classifier_upper_bound",
                point,
                max(0.0, neg_log_p - rhs_log),
                0.0,
                0.0,
                1e-9,
                "log(1/p) <= log(2/prior) + (|y|+sqrt(t)R)^2/(2(1-t)), violation <= 1e-9",
            )
        )

        score_rhs = score_const * ((norm_y + math.sqrt(t) * radius) / (1.0 - t) + d / math.sqrt(1.0 - t))
        for name, s in (
            ("marginal_score_bound", marginal_score(model, level, y)),
            ("conditional_score_bound", conditional_score(model, c, level, y)),
        ):
            lhs = float(np.linalg.norm(s))
            reports.append(
                _report(
                    name,
                    {**point, "score_norm": lhs, "bound": score_rhs},
                    max(0.0, lhs - score_rhs),
                    0.0,
                    0.0,
                    1e-9,
                    f"||score|| <= {score_const:g}*((|y|+sqrt(t)R)/(1-t) + d/sqrt(1-t)), violation <= 1e-9",
                )
            )

        fd = _fd_scaled_inverse_gradient(model, c, level, y)
        analytic = marginal_score(model, level, y) - conditional_score(model, c, level, y)
        rel = float(np.linalg.norm(fd - analytic) / max(np.linalg.norm(analytic), 1e-12))
        reports.append(
            _report(
                "inverse_prob_gradient_identity",
                point,
                rel,
                0.0,
                0.0,
                1e-5,
                "||fd(p * grad(1/p)) - (s_marg - s_cond)|| / max(||.||, 1e-12) <= 1e-5",
            )
        )
    return reports


# ---------------------------------------------------------------------------
# Law equivalence of the reverse SDE and discretization behavior
# ---------------------------------------------------------------------------


def marginal_equivalence(
    model: ClassConditionalModel,
    c: int,
    t_checkpoints,
    dt: float,
    n_paths: int,
    seed: int,
    delta: float = DELTA_DEFAULT,
    alpha: float = 0.01,
) -> list[CheckReport]:
    """KS-compare reverse-SDE marginals against direct draws from the noised law.

    Paths start from the exact class-c law noised to level alpha_bar = delta
    and are integrated without guidance; at each checkpoint time t the batch
    is compared against fresh draws from the law at level alpha_bar = t.
    Pass at significance ``alpha`` with Bonferroni correction over
    checkpoints, using the asymptotic two-sample Smirnov critical value.
    """
    if model.dimension != 1:
        raise ValueError("marginal_equivalence uses a KS test and supports d = 1 only")
    checkpoints = sorted(float(t) for t in t_checkpoints)
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    ss = np.random.SeedSequence(seed)
    ss_paths, ss_direct = ss.spawn(2)
    rng_paths = np.random.default_rng(ss_paths)
    rng_direct = np.random.default_rng(ss_direct)

    start = noised_mixture(model.class_mixtures[c], NoiseLevel(alpha_bar=delta))
    y0 = sample_mixture(start, n_paths, rng_paths)
    t_end = max(checkpoints)
    _, snaps = em_reverse_paths(
        model, c, 0.0, delta, t_end, dt, y0, rng_paths, checkpoints=tuple(checkpoints)
    )

    k = len(checkpoints)
    alpha_each = alpha / k
    crit_scale = math.sqrt(-0.5 * math.log(alpha_each / 2.0))
    reports = []
    for t in checkpoints:
        sim = snaps[t][:, 0]
        direct = sample_mixture(
            noised_mixture(model.class_mixtures[c], NoiseLevel(alpha_bar=t)), n_paths, rng_direct
        )[:, 0]
        res = ks_2samp(sim, direct)
        n, m = sim.size, direct.size
        crit = crit_scale * math.sqrt((n + m) / (n * m))
        reports.append(
            _report(
                "reverse_sde_marginal_ks",
                {
                    "c": c,
                    "t": t,
                    "dt": dt,
                    "n_paths": n_paths,
                    "seed": seed,
                    "p_value": float(res.pvalue),
                },
                float(res.statistic),
                0.0,
                math.sqrt((n + m) / (n * m)),
                crit,
                f"KS <= sqrt(-ln(a/2)/2)*sqrt((n+m)/(n m)), a={alpha:g}/{k} (Bonferroni)",
            )
        )
    return reports


def discretization_study(
    model: ClassConditionalModel,
    c: int,
    w: float,
    N_list,
    trials: int,
    seed: int,
    ref_multiplier: int = 4,
    c0: float = 2.0,
    c1: float = 4.0,
    bootstrap: int = 100,
) -> list[dict]:
    """Convergence of the chain endpoint law as the step count N grows.

    For each N, runs coupled guided trials on the recurrence schedule and
    records the mean of -1/p plus the KS distance of the guided endpoints to
    a reference run at ``ref_multiplier * max(N_list)`` steps (a proxy for
    the continuous limit).  Each row carries a bootstrap standard error of
    the KS distance and a ``pass`` flag: distance non-increasing relative to
    the previous row up to 2 pooled standard errors.  Distinct runs use
    disjoint noise-stream families, keeping the KS comparisons independent.
    """
    if model.dimension != 1:
        raise ValueError("discretization_study uses a KS distance and supports d = 1 only")
    N_list = [int(n) for n in N_list]
    if N_list != sorted(N_list) or len(set(N_list)) != len(N_list):
        raise ValueError("N_list must be strictly increasing")
    n_ref = ref_multiplier * max(N_list)

    def run(n_steps):
        sched = build_schedule(n_steps, c0, c1)
        return run_coupled_trials(
            model, sched, w, c, master_seed=seed, n_trials=trials, stream_tag=n_steps
        )

    ref = run(n_ref)
    y_ref = ref.y_guided[:, 0]
    rows = []
    prev = None
    for n_steps in N_list:
        ct = run(n_steps)
        y = ct.y_guided[:, 0]
        dist = ks_statistic(y, y_ref)
        brng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, n_steps)))
        boots = np.empty(bootstrap)
        for b in range(bootstrap):
            ia = brng.integers(0, y.size, y.size)
            ib = brng.integers(0, y_ref.size, y_ref.size)
            boots[b] = ks_statistic(y[ia], y_ref[ib])
        ks_se = float(np.std(boots, ddof=1))
        mean_neg_inv, mean_se = kahan_mean(-np.exp(-ct.log_p_guided))
        if prev is None:
            ok = True
        else:
            ok = dist <= prev[0] + 2.0 * math.sqrt(ks_se**2 + prev[1] ** 2)
        rows.append(
            {
                "n_steps": n_steps,
                "w": w,
                "trials": trials,
                "mean_neg_inv_prob": mean_neg_inv,
                "mean_se": mean_se,
                "ks_distance": dist,
                "ks_se": ks_se,
                "reference_steps": n_ref,
                "pass": bool(ok),
            }
        )
        prev = (dist, ks_se)
    return rows


# ---------------------------------------------------------------------------
# Discretization correction ratio
# ---------------------------------------------------------------------------


def relative_error_ratio(trials, tv_budget: float) -> float:
    """Tail-correction term of the guidance improvement, as a fraction of the gap.

    ``tv_budget`` plays the role of a total-variation allowance: the threshold
    tau is the largest value whose empirical tail probability
    P(1/p_guided > tau) still reaches the budget (the k-th largest reciprocal
    with k = ceil(budget * n); an empty budget gives tau = +inf).  Returns

        mean[(1/p_guided - 1) * 1(1/p_guided > tau)]
        / (mean[1/p_baseline] - mean[1/p_guided]),

    which is monotone non-decreasing in the budget.  Raises
    NoImprovementError when the denominator is not positive.
    """
    if not 0.0 <= tv_budget < 1.0:
        raise ValueError(f"tv_budget must be in [0, 1), got {tv_budget}")
    if isinstance(trials, CoupledTrials):
        inv_g = np.exp(-trials.log_p_guided)
        inv_b = np.exp(-trials.log_p_baseline)
    else:
        trials = list(trials)
        if not trials:
            raise ValueError("need at least one trial")
        ws = {r.w for r in trials}
        if len(ws) != 1:
            raise ValueError(f"trials must share one w, got {sorted(ws)}")
        inv_g = np.array([1.0 / r.p_guided for r in trials])
        inv_b = np.array([1.0 / r.p_baseline for r in trials])
    mean_g, _ = kahan_mean(inv_g)
    mean_b, _ = kahan_mean(inv_b)
    denom = mean_b - mean_g
    if denom <= 0.0:
        raise NoImprovementError(mean_b, mean_g)
    if tv_budget == 0.0:
        return 0.0
    n = inv_g.size
    k = math.ceil(tv_budget * n)
    tau = np.sort(inv_g)[::-1][k - 1]
    numerator, _ = kahan_mean((inv_g - 1.0) * (inv_g > tau))
    return numerator / denom
