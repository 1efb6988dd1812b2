"""Discrete reverse-diffusion chains and continuous-time reverse simulation.

The discrete chains implement the standard recursions: the forward noising
chain ``X_n = sqrt(1 - beta_n) X_{n-1} + sqrt(beta_n) Z_n`` and the reverse
chain ``Y_{n-1} = (Y_n + beta_n s_n(Y_n)) / sqrt(1 - beta_n) + sqrt(beta_n) Z_n``
with the drift score selected by the guidance mode.  The continuous-time
sampler is an explicit Euler-Maruyama discretization of the guided reverse
SDE ``dY = (Y/2 + (1+w) s(Y|c) - w s(Y)) dt/t + dB / sqrt(t)``.

Time convention for the reverse SDE: the state at SDE time t is distributed
as the data noised to level alpha_bar = t, so scores are evaluated at
``NoiseLevel(alpha_bar=t)`` and the simulation runs from t near 0 (noise)
up to t near 1 (data).

Randomness is organized into splittable per-trial streams keyed by
``(master_seed, trial_index)``, so a trial's noise does not depend on how
many other trials run, in what order, or on how work is divided into
blocks or threads.  Guided and baseline chains of a coupled pair share the
initial draw and every step noise (common random numbers).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .mixture import (
    ClassConditionalModel,
    MixtureModel,
    NoiseLevel,
    classifier_log_prob,
    conditional_score,
    marginal_score,
    noised_mixture,
    score,
)
from .schedules import Schedule, level_of

__all__ = [
    "GuidanceSpec",
    "TrialRecord",
    "Trajectory",
    "CoupledTrials",
    "trial_stream",
    "forward_chain",
    "reverse_chain",
    "coupled_pair",
    "run_coupled_trials",
    "euler_maruyama_reverse",
    "em_reverse_paths",
]

GUIDANCE_MODES = ("none", "classifier", "classifier_free")


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance mode, scale w >= 0, and target class."""

    mode: str
    w: float = 0.0
    target_class: int | None = None

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"mode must be one of {GUIDANCE_MODES}, got {self.mode!r}")
        if self.w < 0.0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        if self.mode == "none" and self.w != 0.0:
            raise ValueError("mode 'none' requires w = 0")
        if self.mode != "none" and self.target_class is None:
            raise ValueError(f"mode {self.mode!r} requires a target class")


@dataclass(frozen=True)
class TrialRecord:
    """One coupled (guided, baseline) sampling trial."""

    master_seed: int
    trial_index: int
    w: float
    y_guided: np.ndarray
    y_baseline: np.ndarray
    p_guided: float
    p_baseline: float
    improved: bool

    def __post_init__(self):
        if self.improved != (self.p_guided >= self.p_baseline):
            raise ValueError("improved flag must equal (p_guided >= p_baseline)")


@dataclass(frozen=True)
class Trajectory:
    """States of a chain together with the noise level of each state."""

    levels: tuple[NoiseLevel, ...]
    states: np.ndarray

    def __post_init__(self):
        if len(self.levels) != len(self.states):
            raise ValueError("levels and states must have the same length")


def trial_stream(master_seed: int, trial_index: int) -> np.random.Generator:
    """The splittable per-trial noise stream: child (trial_index,) of the master seed."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(trial_index,)))


def _tagged_stream(master_seed: int, tag: int, trial_index: int, role: int = 0) -> np.random.Generator:
    # 3-part spawn keys keep tagged streams disjoint from the plain (trial_index,) ones
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(tag, trial_index, role))
    )


# ---------------------------------------------------------------------------
# Discrete chains
# ---------------------------------------------------------------------------


def forward_chain(model: MixtureModel, schedule: Schedule, x0, rng) -> Trajectory:
    """Run the forward noising recursion from x0, recording X_1..X_N."""
    x = np.asarray(x0, dtype=float)
    if x.shape != (model.dimension,):
        raise ValueError(f"x0 must have shape ({model.dimension},), got {x.shape}")
    states = np.empty((schedule.N, model.dimension))
    for n in range(1, schedule.N + 1):
        b = schedule.beta[n - 1]
        x = math.sqrt(1.0 - b) * x + math.sqrt(b) * rng.standard_normal(model.dimension)
        states[n - 1] = x
    levels = tuple(level_of(schedule, n) for n in range(1, schedule.N + 1))
    return Trajectory(levels=levels, states=states)


def _chain_scores(
    model: ClassConditionalModel, spec: GuidanceSpec, level: NoiseLevel, y: np.ndarray
) -> np.ndarray:
    """Drift score for a batch of states, per guidance mode."""
    if spec.mode == "none":
        return marginal_score(model, level, y)
    cond = conditional_score(model, spec.target_class, level, y)
    if spec.w == 0.0:
        return cond
    marg = marginal_score(model, level, y)
    if spec.mode == "classifier":
        return cond + spec.w * (cond - marg)
    return (1.0 + spec.w) * cond - spec.w * marg


def _reverse_chain_batch(
    model: ClassConditionalModel,
    schedule: Schedule,
    spec: GuidanceSpec,
    y_init: np.ndarray,
    step_noise: np.ndarray,
) -> np.ndarray:
    """Iterate the reverse recursion n = N..2 on a batch, returning Y_1.

    ``y_init`` has shape (m, d); ``step_noise`` has shape (m, N-1, d) and is
    consumed in step order n = N, N-1, ..., 2.
    """
    y = y_init.copy()
    for k, n in enumerate(range(schedule.N, 1, -1)):
        b = schedule.beta[n - 1]
        s = _chain_scores(model, spec, level_of(schedule, n), y)
        y = (y + b * s) / math.sqrt(1.0 - b) + math.sqrt(b) * step_noise[:, k, :]
    return y


def reverse_chain(
    model: ClassConditionalModel, schedule: Schedule, guidance: GuidanceSpec, rng
) -> np.ndarray:
    """Sample Y_1 from the reverse chain, starting from Y_N ~ N(0, I)."""
    d = model.dimension
    noise = rng.standard_normal((schedule.N, d))
    y = _reverse_chain_batch(model, schedule, guidance, noise[None, 0], noise[None, 1:])
    return y[0]


# ---------------------------------------------------------------------------
# Coupled guided/baseline trials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledTrials:
    """Vectorized results of coupled (guided, baseline) trials, in trial order."""

    master_seed: int
    w: float
    target_class: int
    indices: np.ndarray
    y_guided: np.ndarray
    y_baseline: np.ndarray
    log_p_guided: np.ndarray
    log_p_baseline: np.ndarray
    level: NoiseLevel = field(repr=False)

    @property
    def p_guided(self) -> np.ndarray:
        return np.exp(self.log_p_guided)

    @property
    def p_baseline(self) -> np.ndarray:
        return np.exp(self.log_p_baseline)

    @property
    def improved(self) -> np.ndarray:
        return self.p_guided >= self.p_baseline

    def __len__(self):
        return len(self.indices)

    def to_records(self) -> list[TrialRecord]:
        pg, pb, imp = self.p_guided, self.p_baseline, self.improved
        return [
            TrialRecord(
                master_seed=self.master_seed,
                trial_index=int(self.indices[i]),
                w=self.w,
                y_guided=self.y_guided[i].copy(),
                y_baseline=self.y_baseline[i].copy(),
                p_guided=float(pg[i]),
                p_baseline=float(pb[i]),
                improved=bool(imp[i]),
            )
            for i in range(len(self.indices))
        ]


def _run_trial_block(model, schedule, w, c, master_seed, indices, coupled, stream_tag, mode):
    N, d = schedule.N, model.dimension
    m = len(indices)
    noise = np.empty((m, N, d))
    for i, idx in enumerate(indices):
        if stream_tag is None:
            stream = trial_stream(master_seed, int(idx))
        else:
            stream = _tagged_stream(master_seed, stream_tag, int(idx))
        noise[i] = stream.standard_normal((N, d))
    guided_spec = GuidanceSpec(mode=mode, w=w, target_class=c)
    base_spec = GuidanceSpec(mode=mode, w=0.0, target_class=c)
    y_g = _reverse_chain_batch(model, schedule, guided_spec, noise[:, 0], noise[:, 1:])
    if coupled:
        base_noise = noise
    else:
        base_noise = np.empty_like(noise)
        for i, idx in enumerate(indices):
            stream = _tagged_stream(master_seed, stream_tag or 0, int(idx), role=1)
            base_noise[i] = stream.standard_normal((N, d))
    y_b = _reverse_chain_batch(model, schedule, base_spec, base_noise[:, 0], base_noise[:, 1:])
    return y_g, y_b


def run_coupled_trials(
    model: ClassConditionalModel,
    schedule: Schedule,
    w: float,
    c: int,
    master_seed: int,
    n_trials: int,
    start_index: int = 0,
    coupled: bool = True,
    block_size: int = 2048,
    threads: int = 1,
    stream_tag: int | None = None,
    mode: str = "classifier_free",
) -> CoupledTrials:
    """Run many coupled trials with per-trial noise streams.

    Results are identical for a given (master_seed, trial index) regardless
    of n_trials, start_index, thread count, or which other w values are run.
    ``stream_tag`` selects an alternative disjoint family of streams (used
    by studies that must not share noise with the default family).
    """
    if w < 0.0:
        raise ValueError(f"w must be >= 0, got {w}")
    if mode == "none" and w != 0.0:
        raise ValueError("mode 'none' requires w = 0")
    indices = np.arange(start_index, start_index + n_trials)
    blocks = [indices[i : i + block_size] for i in range(0, n_trials, block_size)]
    d = model.dimension
    y_g = np.empty((n_trials, d))
    y_b = np.empty((n_trials, d))

    def work(block_index):
        block = blocks[block_index]
        out = _run_trial_block(model, schedule, w, c, master_seed, block, coupled, stream_tag, mode)
        lo = block_index * block_size
        y_g[lo : lo + len(block)] = out[0]
        y_b[lo : lo + len(block)] = out[1]

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(blocks))))
    else:
        for b in range(len(blocks)):
            work(b)

    level1 = level_of(schedule, 1)
    log_pg = np.asarray(classifier_log_prob(model, c, level1, y_g))
    log_pb = np.asarray(classifier_log_prob(model, c, level1, y_b))
    return CoupledTrials(
        master_seed=master_seed,
        w=w,
        target_class=c,
        indices=indices,
        y_guided=y_g,
        y_baseline=y_b,
        log_p_guided=log_pg,
        log_p_baseline=log_pb,
        level=level1,
    )


def coupled_pair(
    model: ClassConditionalModel,
    schedule: Schedule,
    w: float,
    c: int,
    master_seed: int,
    trial_index: int,
    coupled: bool = True,
) -> TrialRecord:
    """One coupled (guided, baseline) trial; deterministic in (master_seed, trial_index).

    Classifier probabilities are evaluated at the level of step 1 (the chain
    stops at Y_1, which approximates the data noised to alpha_bar_1, not the
    clean data); with the recurrence schedule alpha_bar_1 is close to 1.
    """
    trials = run_coupled_trials(
        model, schedule, w, c, master_seed, n_trials=1, start_index=trial_index, coupled=coupled
    )
    return trials.to_records()[0]


# ---------------------------------------------------------------------------
# Continuous-time reverse simulation
# ---------------------------------------------------------------------------


def _segment_steps(t_from: float, t_to: float, dt: float) -> list[tuple[float, float]]:
    """(time, step) pairs covering [t_from, t_to]; the last step lands exactly on t_to."""
    span = t_to - t_from
    n_full = int(math.floor(span / dt + 1e-12))
    steps = [(t_from + k * dt, dt) for k in range(n_full)]
    t_last = t_from + n_full * dt
    if t_to - t_last > 1e-12 * max(1.0, t_to):
        steps.append((t_last, t_to - t_last))
    return steps


def _em_guided_score(model, c, w, level, y):
    cond = conditional_score(model, c, level, y)
    if w == 0.0:
        return cond
    return (1.0 + w) * cond - w * marginal_score(model, level, y)


def _em_step(model, c, w, t, h, y, z):
    # y*(1 + h/2t) + s*(h/t) + sqrt(h/t)*z, i.e. (y/2 + s)*h/t added to y
    level = NoiseLevel(alpha_bar=t)
    s = _em_guided_score(model, c, w, level, y)
    a = h / t
    if s.shape == z.shape:
        s *= a
        s += (1.0 + 0.5 * a) * y
        s += math.sqrt(a) * z
        return s
    return (1.0 + 0.5 * a) * y + a * s + math.sqrt(a) * z


def em_reverse_paths(
    model: ClassConditionalModel,
    c: int,
    w: float,
    t_start: float,
    t_end: float,
    dt: float,
    y_start: np.ndarray,
    rng,
    checkpoints: tuple[float, ...] = (),
) -> tuple[np.ndarray, dict[float, np.ndarray]]:
    """Integrate a batch of guided reverse-SDE paths from t_start to t_end.

    ``y_start`` has shape (m, d).  Snapshots of the batch are recorded at the
    requested checkpoint times (which are hit exactly).  Returns the final
    states and the snapshot dict.
    """
    if not 0.0 < t_start < t_end <= 1.0:
        raise ValueError(f"need 0 < t_start < t_end <= 1, got ({t_start}, {t_end})")
    if dt <= 0.0:
        raise ValueError(f"dt must be > 0, got {dt}")
    for cp in checkpoints:
        if not t_start <= cp <= t_end:
            raise ValueError(f"checkpoint {cp} outside [{t_start}, {t_end}]")
    y = np.array(y_start, dtype=float)
    if y.ndim != 2 or y.shape[1] != model.dimension:
        raise ValueError(f"y_start must have shape (m, {model.dimension})")
    snapshots: dict[float, np.ndarray] = {}
    boundaries = sorted(set(checkpoints) | {t_end})
    if boundaries and math.isclose(boundaries[0], t_start, rel_tol=0, abs_tol=1e-15):
        snapshots[boundaries[0]] = y.copy()
        boundaries = boundaries[1:]
    t_from = t_start
    for t_to in boundaries:
        for t, h in _segment_steps(t_from, t_to, dt):
            z = rng.standard_normal(y.shape)
            y = _em_step(model, c, w, t, h, y, z)
        if t_to != t_end or t_to in set(checkpoints):
            snapshots[t_to] = y.copy()
        t_from = t_to
    return y, snapshots


def euler_maruyama_reverse(
    model: ClassConditionalModel,
    c: int,
    w: float,
    t_start: float,
    t_end: float,
    dt: float,
    y_start,
    rng,
) -> Trajectory:
    """Explicit Euler-Maruyama path of the guided reverse SDE, states recorded per step.

    The increment at time t with step h is
    ``(y/2 + (1+w) s(y|c; alpha_bar=t) - w s(y; alpha_bar=t)) * h/t + sqrt(h/t) z``;
    the final step is shortened to land exactly on t_end.
    """
    if not 0.0 < t_start < t_end <= 1.0:
        raise ValueError(f"need 0 < t_start < t_end <= 1, got ({t_start}, {t_end})")
    if dt <= 0.0:
        raise ValueError(f"dt must be > 0, got {dt}")
    y = np.asarray(y_start, dtype=float)
    if y.shape != (model.dimension,):
        raise ValueError(f"y_start must have shape ({model.dimension},), got {y.shape}")
    steps = _segment_steps(t_start, t_end, dt)
    levels = [NoiseLevel(alpha_bar=t_start)]
    states = [y.copy()]
    yb = y[None, :]
    for t, h in steps:
        z = rng.standard_normal(yb.shape)
        yb = _em_step(model, c, w, t, h, yb, z)
        levels.append(NoiseLevel(alpha_bar=min(t + h, 1.0)))
        states.append(yb[0].copy())
    return Trajectory(levels=tuple(levels), states=np.array(states))
