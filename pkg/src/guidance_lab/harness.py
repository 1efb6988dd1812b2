"""Experiment configuration, aggregation, and machine-readable outputs.

The flagship experiment runs coupled (guided, baseline) trials over a grid
of guidance scales and reduces them to per-scale summary rows: the fraction
of trials whose classifier probability improved (with a Wilson 95% interval,
which stays informative near 1) and the mean of the negative reciprocal
classifier probability (Kahan-compensated, summed in trial order, with a
standard error).

All CSV output uses comma delimiters, '.' decimals, LF line endings, and a
header row; floats are written in shortest round-trip form so that parsing
the file back reproduces the values exactly.  JSON summaries are pretty
printed with sorted keys.  Identical configuration and master seed produce
byte-identical files regardless of thread count.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mixture import ClassConditionalModel, load_model
from .samplers import CoupledTrials, TrialRecord, run_coupled_trials
from .schedules import Schedule, build_schedule, linear_beta_schedule
from .stats import kahan_mean, wilson_interval

__all__ = [
    "ExperimentConfig",
    "SummaryRow",
    "summarize",
    "run_gmm_experiment",
    "emit_plot_data",
    "write_csv",
    "write_json",
    "resolve_threads",
    "DESK_N", "DESK_TRIALS", "PAPER_N", "PAPER_TRIALS",
]

DESK_N = 500
DESK_TRIALS = 2000
PAPER_N = 4000
PAPER_TRIALS = 10_000

THREADS_ENV_VAR = "GUIDANCE_LAB_THREADS"


def resolve_threads(threads: int | None) -> int:
    """Worker count: the environment variable overrides the flag; 0 means auto."""
    env = os.environ.get(THREADS_ENV_VAR)
    if env is not None:
        threads = int(env)
    if threads is None:
        threads = 1
    if threads == 0:
        threads = os.cpu_count() or 1
    if threads < 0:
        raise ValueError(f"threads must be >= 0, got {threads}")
    return threads


@dataclass(frozen=True)
class ExperimentConfig:
    """Configuration of one guidance-scale sweep."""

    model: str = "paper-gmm"
    N: int = DESK_N
    c0: float = 2.0
    c1: float = 4.0
    linear_betas: tuple[float, float] | None = None
    w_grid: tuple[float, ...] = (0.01, 0.1, 0.5, 1.0, 2.0, 4.0, 10.0)
    target_class: int = 1
    trials: int = DESK_TRIALS
    master_seed: int = 0
    out_dir: str | None = None
    uncoupled: bool = False
    threads: int = 1

    def __post_init__(self):
        w = tuple(float(v) for v in self.w_grid)
        if not w:
            raise ValueError("w_grid must be nonempty")
        if len(set(w)) != len(w) or list(w) != sorted(w):
            raise ValueError("w_grid values must be distinct and sorted ascending")
        if any(v < 0 for v in w):
            raise ValueError("w_grid values must be >= 0")
        object.__setattr__(self, "w_grid", w)
        if self.trials < 2:
            raise ValueError("need trials >= 2 so standard errors are defined")

    def build_schedule(self) -> Schedule:
        if self.linear_betas is not None:
            lo, hi = self.linear_betas
            return linear_beta_schedule(self.N, lo, hi)
        return build_schedule(self.N, self.c0, self.c1)

    def load_model(self) -> ClassConditionalModel:
        return load_model(self.model)

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"{path}: unknown config fields {sorted(unknown)}")
        if "w_grid" in doc:
            doc["w_grid"] = tuple(doc["w_grid"])
        if doc.get("linear_betas") is not None:
            doc["linear_betas"] = tuple(doc["linear_betas"])
        return cls(**doc)


@dataclass(frozen=True)
class SummaryRow:
    """Aggregates of the coupled trials at one guidance scale."""

    w: float
    n_trials: int
    p_improve: float
    ci_lo: float
    ci_hi: float
    mean_neg_inv_prob: float
    stderr: float
    mean_neg_inv_prob_baseline: float
    stderr_baseline: float

    def __post_init__(self):
        if not 0.0 <= self.p_improve <= 1.0:
            raise ValueError("p_improve must be in [0, 1]")
        if not self.ci_lo <= self.p_improve <= self.ci_hi:
            raise ValueError("the Wilson interval must contain the point estimate")


def _reciprocals(trials) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(trials, CoupledTrials):
        inv_g = np.exp(-trials.log_p_guided)
        inv_b = np.exp(-trials.log_p_baseline)
        improved = trials.improved
        return trials.w, inv_g, inv_b, improved
    records: Sequence[TrialRecord] = list(trials)
    if not records:
        raise ValueError("need at least one trial")
    ws = {r.w for r in records}
    if len(ws) != 1:
        raise ValueError(f"trials must share one w, got {sorted(ws)}")
    inv_g = np.array([1.0 / r.p_guided for r in records])
    inv_b = np.array([1.0 / r.p_baseline for r in records])
    improved = np.array([r.improved for r in records])
    return records[0].w, inv_g, inv_b, improved


def summarize(trials) -> SummaryRow:
    """Reduce homogeneous-w coupled trials to a SummaryRow."""
    w, inv_g, inv_b, improved = _reciprocals(trials)
    n = inv_g.size
    if n < 2:
        raise ValueError("need at least two trials for standard errors")
    k = int(np.count_nonzero(improved))
    lo, hi = wilson_interval(k, n)
    mean_g, se_g = kahan_mean(-inv_g)
    mean_b, se_b = kahan_mean(-inv_b)
    return SummaryRow(
        w=w,
        n_trials=n,
        p_improve=k / n,
        ci_lo=lo,
        ci_hi=hi,
        mean_neg_inv_prob=mean_g,
        stderr=se_g,
        mean_neg_inv_prob_baseline=mean_b,
        stderr_baseline=se_b,
    )


# ---------------------------------------------------------------------------
# CSV / JSON output
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True)
    return str(value)


def write_csv(path, header: Sequence[str], rows) -> str:
    """Write rows (sequences or dicts) as CSV: comma, '.', LF, header row."""
    path = str(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row[h] for h in header]
            writer.writerow([_fmt(v) for v in row])
    return path


def write_json(path, obj) -> str:
    path = str(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _join_coords(vec) -> str:
    return ";".join(repr(float(v)) for v in np.atleast_1d(vec))


TRIALS_HEADER = ["trial_index", "w", "y_guided", "y_baseline", "p_guided", "p_baseline", "improved"]

SUMMARY_HEADER = [
    "w", "n_trials", "p_improve", "ci_lo", "ci_hi",
    "mean_neg_inv_prob", "stderr", "mean_neg_inv_prob_baseline", "stderr_baseline",
]


def write_trials_csv(path, trial_sets: Sequence[CoupledTrials]) -> str:
    rows = []
    for ct in trial_sets:
        pg, pb, imp = ct.p_guided, ct.p_baseline, ct.improved
        for i in range(len(ct)):
            rows.append(
                [
                    int(ct.indices[i]),
                    ct.w,
                    _join_coords(ct.y_guided[i]),
                    _join_coords(ct.y_baseline[i]),
                    float(pg[i]),
                    float(pb[i]),
                    bool(imp[i]),
                ]
            )
    return write_csv(path, TRIALS_HEADER, rows)


def write_summary_csv(path, rows: Sequence[SummaryRow]) -> str:
    return write_csv(
        path,
        SUMMARY_HEADER,
        [
            [
                r.w, r.n_trials, r.p_improve, r.ci_lo, r.ci_hi,
                r.mean_neg_inv_prob, r.stderr, r.mean_neg_inv_prob_baseline, r.stderr_baseline,
            ]
            for r in rows
        ],
    )


def read_summary_csv(path) -> list[SummaryRow]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                SummaryRow(
                    w=float(rec["w"]),
                    n_trials=int(rec["n_trials"]),
                    p_improve=float(rec["p_improve"]),
                    ci_lo=float(rec["ci_lo"]),
                    ci_hi=float(rec["ci_hi"]),
                    mean_neg_inv_prob=float(rec["mean_neg_inv_prob"]),
                    stderr=float(rec["stderr"]),
                    mean_neg_inv_prob_baseline=float(rec["mean_neg_inv_prob_baseline"]),
                    stderr_baseline=float(rec["stderr_baseline"]),
                )
            )
    return out


def emit_plot_data(summary: Sequence[SummaryRow], out_dir) -> tuple[str, str]:
    """Write the two plot-ready series: improvement ratio and mean -1/p vs w."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ratio_path = write_csv(
        out_dir / "improve_ratio.csv",
        ["w", "p_improve", "ci_lo", "ci_hi"],
        [[r.w, r.p_improve, r.ci_lo, r.ci_hi] for r in summary],
    )
    mean_path = write_csv(
        out_dir / "mean_neg_inv_prob.csv",
        ["w", "mean_neg_inv_prob", "stderr"],
        [[r.w, r.mean_neg_inv_prob, r.stderr] for r in summary],
    )
    return ratio_path, mean_path


# ---------------------------------------------------------------------------
# The guidance-scale sweep
# ---------------------------------------------------------------------------


def run_trial_sets(config: ExperimentConfig) -> list[CoupledTrials]:
    """One CoupledTrials per w in the grid.

    Noise streams are keyed by (master_seed, trial_index) alone, so the
    trials at a given w are identical no matter which other w values are in
    the grid, and trial noise is shared across the grid (common random
    numbers in w as well as within each coupled pair).
    """
    model = config.load_model()
    schedule = config.build_schedule()
    threads = resolve_threads(config.threads)
    return [
        run_coupled_trials(
            model,
            schedule,
            w,
            config.target_class,
            config.master_seed,
            config.trials,
            coupled=not config.uncoupled,
            threads=threads,
        )
        for w in config.w_grid
    ]


def run_gmm_experiment(config: ExperimentConfig) -> list[SummaryRow]:
    """Run the sweep, optionally writing summary.csv and trials.csv to out_dir."""
    trial_sets = run_trial_sets(config)
    rows = [summarize(ct) for ct in trial_sets]
    if config.out_dir is not None:
        out = Path(config.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_trials_csv(out / "trials.csv", trial_sets)
            write_summary_csv(out / "summary.csv", rows)
        except OSError as e:
            raise RuntimeError(f"cannot write results under {out}: {e}") from e
    return rows
