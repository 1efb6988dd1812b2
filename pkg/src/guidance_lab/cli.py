"""Command-line entry point: ``guidance-lab <subcommand>``.

Subcommands: schedule, sample, gmm-experiment, martingale, theorem1, bounds,
equivalence, convergence, ratio.  Check subcommands write a CheckReport CSV
plus a JSON summary and exit nonzero if any asserted check fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import suites
from .harness import (
    DESK_N,
    DESK_TRIALS,
    PAPER_N,
    PAPER_TRIALS,
    ExperimentConfig,
    emit_plot_data,
    resolve_threads,
    run_gmm_experiment,
    write_csv,
    write_json,
)
from .mixture import load_model
from .samplers import run_coupled_trials
from .schedules import build_schedule, linear_beta_schedule


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _common(parser: argparse.ArgumentParser, out_default="results", out_help="output directory"):
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--out", default=out_default, help=out_help)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads (0 = auto; GUIDANCE_LAB_THREADS overrides)")
    parser.add_argument("--config", default=None, help="JSON config file")


def _schedule_args(parser: argparse.ArgumentParser):
    parser.add_argument("--model", default="paper-gmm", help="preset name or model JSON path")
    parser.add_argument("--N", type=int, default=DESK_N, help="number of steps")
    parser.add_argument("--c0", type=float, default=2.0)
    parser.add_argument("--c1", type=float, default=4.0)
    parser.add_argument("--linear", nargs=2, type=float, metavar=("BMIN", "BMAX"),
                        default=None, help="use a linear beta schedule instead")
    parser.add_argument("--class", dest="target_class", type=int, default=1)


def _build_schedule(args):
    if args.linear is not None:
        return linear_beta_schedule(args.N, args.linear[0], args.linear[1])
    return build_schedule(args.N, args.c0, args.c1)


def _finish(reports, out_dir, stem) -> int:
    csv_path, json_path = suites.write_reports(reports, out_dir, stem)
    n_fail = sum(1 for r in reports if not r.passed)
    print(f"{stem}: {len(reports) - n_fail}/{len(reports)} checks passed -> {csv_path}, {json_path}")
    return 1 if n_fail else 0


def cmd_schedule(args) -> int:
    if args.linear is not None:
        sched = linear_beta_schedule(args.N, args.linear[0], args.linear[1])
    else:
        sched = build_schedule(args.N, args.c0, args.c1)
    rows = [
        [n, float(sched.beta[n - 1]), float(sched.alpha_bar[n - 1]), 1.0 - float(sched.alpha_bar[n - 1])]
        for n in range(1, sched.N + 1)
    ]
    path = write_csv(args.out, ["n", "beta_n", "alpha_bar_n", "t_n"], rows)
    print(f"schedule: {sched.N} steps -> {path}")
    return 0


def cmd_sample(args) -> int:
    model = load_model(args.model)
    schedule = _build_schedule(args)
    mode = {"none": "classifier_free", "classifier": "classifier", "cfg": "classifier_free"}[args.mode]
    w = 0.0 if args.mode == "none" else args.w
    trials = run_coupled_trials(
        model,
        schedule,
        w,
        args.target_class,
        args.seed,
        args.trials,
        coupled=not args.uncoupled,
        threads=resolve_threads(args.threads),
        mode=mode,
    )
    from .harness import write_trials_csv

    path = write_trials_csv(args.out, [trials])
    print(f"sample: {args.trials} trials at w={w} -> {path}")
    return 0


def cmd_gmm_experiment(args) -> int:
    if args.config is not None:
        config = ExperimentConfig.from_json(args.config)
        if config.out_dir is None or args.out != "results":
            config = dataclasses.replace(config, out_dir=args.out)
    else:
        n, trials = (PAPER_N, PAPER_TRIALS) if args.paper_scale else (args.N, args.trials)
        config = ExperimentConfig(
            model=args.model,
            N=n,
            c0=args.c0,
            c1=args.c1,
            linear_betas=tuple(args.linear) if args.linear else None,
            w_grid=args.w_grid,
            target_class=args.target_class,
            trials=trials,
            master_seed=args.seed,
            out_dir=args.out,
            uncoupled=args.uncoupled,
            threads=args.threads,
        )
    rows = run_gmm_experiment(config)
    emit_plot_data(rows, config.out_dir)
    write_json(Path(config.out_dir) / "config.json", dataclasses.asdict(config))
    for r in rows:
        print(
            f"w={r.w:g}: p_improve={r.p_improve:.4f} [{r.ci_lo:.4f}, {r.ci_hi:.4f}]  "
            f"mean(-1/p)={r.mean_neg_inv_prob:.6f} (se {r.stderr:.2g})"
        )
    print(f"gmm-experiment: wrote summary.csv, trials.csv, plot series under {config.out_dir}")
    return 0


def cmd_martingale(args) -> int:
    model = load_model(args.model)
    reports = suites.martingale_suite(model, args.target_class, args.samples, args.seed)
    return _finish(reports, args.out, "martingale")


def cmd_theorem1(args) -> int:
    model = load_model(args.model)
    reports = suites.theorem1_suite(model, args.target_class, args.dt, args.replicates, args.seed)
    return _finish(reports, args.out, "theorem1")


def cmd_bounds(args) -> int:
    model = load_model(args.model)
    reports = suites.bounds_suite(model, args.target_class, args.seed)
    return _finish(reports, args.out, "bounds")


def cmd_equivalence(args) -> int:
    model = load_model(args.model)
    reports = suites.equivalence_suite(
        model, args.target_class, args.checkpoints, args.dt, args.paths, args.seed
    )
    return _finish(reports, args.out, "equivalence")


def cmd_convergence(args) -> int:
    model = load_model(args.model)
    rows = suites.convergence_suite(
        model, args.target_class, args.w_list, args.N_list, args.trials, args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = list(rows[0].keys())
    csv_path = write_csv(out / "convergence.csv", header, rows)
    summary = {
        "n_checks": len(rows),
        "n_pass": sum(1 for r in rows if r["pass"]),
        "worst_rel_error": None,
    }
    json_path = write_json(out / "convergence.json", summary)
    n_fail = len(rows) - summary["n_pass"]
    print(f"convergence: {summary['n_pass']}/{len(rows)} rows pass -> {csv_path}, {json_path}")
    return 1 if n_fail else 0


def cmd_ratio(args) -> int:
    model = load_model(args.model)
    reports = suites.ratio_suite(
        model, args.target_class, args.w_grid, args.tv_budget, args.N, args.trials, args.seed
    )
    return _finish(reports, args.out, "ratio")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidance-lab",
                                     description="Guided diffusion sampling on exactly solvable mixtures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="emit a noise schedule as CSV")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--c0", type=float, default=2.0)
    p.add_argument("--c1", type=float, default=4.0)
    p.add_argument("--linear", nargs=2, type=float, metavar=("BMIN", "BMAX"), default=None)
    p.add_argument("--out", default="schedule.csv", help="output CSV file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("sample", help="run coupled guided/baseline trials")
    _schedule_args(p)
    p.add_argument("--mode", choices=["none", "classifier", "cfg"], default="cfg")
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=DESK_TRIALS)
    p.add_argument("--uncoupled", action="store_true",
                   help="give the baseline chain independent noise")
    _common(p, out_default="trials.csv", out_help="output CSV file")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gmm-experiment", help="guidance-scale sweep with summaries")
    _schedule_args(p)
    p.add_argument("--w-grid", type=_parse_floats, default=(0.01, 0.1, 0.5, 1.0, 2.0, 4.0, 10.0))
    p.add_argument("--trials", type=int, default=DESK_TRIALS)
    p.add_argument("--uncoupled", action="store_true")
    p.add_argument("--paper-scale", action="store_true",
                   help=f"use N={PAPER_N} and {PAPER_TRIALS} trials per w")
    _common(p)
    p.set_defaults(func=cmd_gmm_experiment)

    p = sub.add_parser("martingale", help="martingale residuals of the reciprocal classifier probability")
    p.add_argument("--model", default="paper-gmm")
    p.add_argument("--class", dest="target_class", type=int, default=1)
    p.add_argument("--samples", type=int, default=10**6)
    _common(p)
    p.set_defaults(func=cmd_martingale)

    p = sub.add_parser("theorem1", help="one-step decrement of the mean reciprocal vs closed form")
    p.add_argument("--model", default="paper-gmm")
    p.add_argument("--class", dest="target_class", type=int, default=1)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--replicates", type=int, default=10**6)
    _common(p)
    p.set_defaults(func=cmd_theorem1)

    p = sub.add_parser("bounds", help="classifier/score tail bounds and the gradient identity")
    p.add_argument("--model", default="paper-gmm")
    p.add_argument("--class", dest="target_class", type=int, default=1)
    _common(p)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("equivalence", help="KS comparison of reverse-SDE marginals to the noised law")
    p.add_argument("--model", default="paper-gmm")
    p.add_argument("--class", dest="target_class", type=int, default=1)
    p.add_argument("--checkpoints", type=_parse_floats, default=(0.3, 0.6, 0.9))
    p.add_argument("--dt", type=float, default=1e-4)
    p.add_argument("--paths", type=int, default=10**5)
    _common(p)
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("convergence", help="endpoint-law convergence as the step count grows")
    p.add_argument("--model", default="paper-gmm")
    p.add_argument("--class", dest="target_class", type=int, default=1)
    p.add_argument("--N-list", type=_parse_ints, default=(125, 250, 500, 1000))
    p.add_argument("--w-list", type=_parse_floats, default=(0.0, 1.0))
    p.add_argument("--trials", type=int, default=10**4)
    _common(p)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("ratio", help="discretization correction ratio across guidance scales")
    p.add_argument("--model", default="paper-gmm")
    p.add_argument("--class", dest="target_class", type=int, default=1)
    p.add_argument("--w-grid", type=_parse_floats, default=(0.5, 1.0, 2.0, 4.0))
    p.add_argument("--tv-budget", type=float, default=0.1)
    p.add_argument("--N", type=int, default=DESK_N)
    p.add_argument("--trials", type=int, default=4000)
    _common(p)
    p.set_defaults(func=cmd_ratio)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
