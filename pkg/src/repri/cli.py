"""Command-line front door.

Subcommands: ``infer`` (one task), ``bench`` (episodic benchmark),
``ablate`` (loss-term comparison), ``sweep`` (perturbed-oracle curve),
``synth`` (synthetic task generation), ``gradcheck`` (analytic vs
finite-difference gradients).

Exit codes: 0 on success, 1 on flag parsing/validation problems, 2 on
runtime failures (including a failed gradient check).  Every subcommand
is deterministic given its flags; wall-clock timings go to stderr and
never into report files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from .core import (
    ALL_LOSSES,
    LOSS_CE,
    LOSS_H,
    LOSS_KL,
    MODES,
    Hyperparams,
    RepriError,
)
from .engine import repri_infer
from .evaluation import (
    DatasetTaskSource,
    SynthTaskSource,
    TaskDirSource,
    format_real,
    gradcheck_trial,
    hyperparams_dict,
    mask_counts,
    run_benchmark,
    to_canonical_json,
)
from .taskio import SynthConfig, derive_seed, load_index, read_task_container, synth_episode, write_container, write_task_container

GRADCHECK_TOLERANCE = 1e-5

_SELECTOR_NAMES = {
    "ce": frozenset({LOSS_CE}),
    "ce+h": frozenset({LOSS_CE, LOSS_H}),
    "ce+h+kl": ALL_LOSSES,
    "full": ALL_LOSSES,
}


class CliUsageError(RepriError):
    """Bad flag values or missing inputs: exit code 1, not 2."""


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_hp_flags(p: argparse.ArgumentParser, include_selector: bool = True) -> None:
    g = p.add_argument_group("inference settings")
    g.add_argument("--iters", type=int, default=50, help="gradient iterations per task (default 50)")
    g.add_argument("--lr", type=float, default=0.025, help="learning rate (default 0.025)")
    g.add_argument("--t-pi", type=int, default=10,
                   help="iteration at which the proportion plateau switches and the KL weight rises (default 10)")
    g.add_argument("--tau", type=float, default=20.0, help="sigmoid temperature (default 20)")
    g.add_argument("--lambda-h", type=float, default=None,
                   help="entropy weight (default: 1/shots)")
    g.add_argument("--lambda-kl", type=float, default=None,
                   help="base KL weight (default: 1/shots)")
    g.add_argument("--kl-increment", type=float, default=1.0,
                   help="KL weight increase applied from --t-pi on (default 1)")
    g.add_argument("--mode", choices=MODES, default="standard",
                   help="proportion handling: standard schedule, oracle, or perturbed oracle (default standard)")
    g.add_argument("--delta", type=float, default=0.0,
                   help="relative foreground-size error pinned in perturbed mode (default 0)")
    if include_selector:
        g.add_argument("--losses", default="full",
                       help="loss selector: one of ce, ce+h, full/ce+h+kl (default full)")


def _hp_from_args(args) -> Hyperparams:
    requested = getattr(args, "losses", "full")
    selector = _SELECTOR_NAMES.get(requested.strip().lower())
    if selector is None:
        raise CliUsageError(f"unknown loss selector {requested!r}; use ce, ce+h, or full")
    return Hyperparams(
        iterations=args.iters,
        lr=args.lr,
        t_pi=args.t_pi,
        tau=args.tau,
        lambda_h_base=args.lambda_h,
        lambda_kl_base=args.lambda_kl,
        lambda_kl_increment=args.kl_increment,
        mode=args.mode,
        delta=args.delta,
        loss_selector=selector,
    )


def _add_source_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("task source")
    g.add_argument("--tasks", required=True,
                   help="task source: an index file, a directory of .rpri task containers, "
                        "or the literal 'synth' for on-the-fly synthetic tasks")
    g.add_argument("--shots", type=int, default=1, help="support images per task (default 1)")
    g.add_argument("--synth-config", default=None,
                   help="JSON file with synthetic generator settings (used with --tasks synth)")


def _synth_config_from_file(path, shots: int) -> SynthConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        raw["fg_proportion_range"] = tuple(raw.get("fg_proportion_range", (0.1, 0.4)))
        cfg = SynthConfig(**raw)
    except (OSError, ValueError, TypeError) as exc:
        raise CliUsageError(f"cannot load synth config {path!r}: {exc}") from exc
    return dataclasses.replace(cfg, k=shots)


def _resolve_source(args):
    if args.tasks == "synth":
        if args.synth_config:
            cfg = _synth_config_from_file(args.synth_config, args.shots)
        else:
            cfg = SynthConfig(k=args.shots)
        return SynthTaskSource(cfg)
    path = Path(args.tasks)
    if path.is_dir():
        paths = tuple(sorted(str(p) for p in path.glob("*.rpri")))
        if not paths:
            raise CliUsageError(f"no .rpri task containers in {path}")
        return TaskDirSource(paths)
    if path.is_file():
        return DatasetTaskSource(load_index(path), k=args.shots)
    raise CliUsageError(f"--tasks target {args.tasks!r} does not exist")


def _jobs_default() -> int:
    return int(os.environ.get("REPRI_JOBS", "1"))


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _emit_report(text: str, out_path):
    """Write the report to a file, or to stdout when no path was given.

    Returns the stream human-readable summary lines should use, so they
    never interleave with a report that went to stdout.
    """
    if out_path:
        _write_text(out_path, text)
        return sys.stdout
    sys.stdout.write(text)
    return sys.stderr


def _parse_deltas(spec: str):
    try:
        if ":" in spec:
            lo, hi, step = (float(x) for x in spec.split(":"))
            if step <= 0 or hi < lo:
                raise CliUsageError(f"bad delta grid {spec!r}: need lo:hi:step with step > 0")
            out = []
            v = lo
            while v <= hi + 1e-12:
                out.append(round(v, 12))
                v += step
            return out
        return [float(x) for x in spec.split(",")]
    except ValueError as exc:
        raise CliUsageError(f"cannot parse --deltas {spec!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def _cmd_infer(args) -> int:
    if not Path(args.task).is_file():
        raise CliUsageError(f"--task file {args.task!r} does not exist")
    task, _class_id = read_task_container(args.task)
    hp = _hp_from_args(args)
    result = repri_infer(task, hp)

    rows = [
        {
            "t": t,
            "ce": b.ce,
            "entropy": b.entropy,
            "kl": b.kl,
            "total": b.total,
            "lambda_h": b.lambda_h,
            "lambda_kl": b.lambda_kl,
        }
        for t, b in enumerate(result.loss_trajectory)
    ]
    summary = {
        "config": hyperparams_dict(hp),
        "task": str(args.task),
        "loss_trajectory": rows,
        "pi_history": [{"bg": p.bg, "fg": p.fg} for p in result.pi_history],
        "delta_history": list(result.delta_history) if result.delta_history is not None else None,
        "final_bias": result.params_final.b,
        "prototype_norm": float(np.linalg.norm(result.params_final.w)),
        "iou": None,
    }
    if task.query_gt is not None:
        inter, union = mask_counts(result.final_mask, task.query_gt)
        summary["iou"] = inter / union if union else 1.0

    if args.out:
        write_container(
            args.out,
            {
                "query_probs": result.final_probs.values.astype(np.float32),
                "query_mask_pred": result.final_mask.values,
                "prototype": result.params_final.w.astype(np.float32),
            },
        )
    if args.summary:
        _write_text(args.summary, to_canonical_json(summary) + "\n")

    final = result.loss_trajectory[-1]
    print(
        f"final loss: ce={format_real(final.ce)} entropy={format_real(final.entropy)} "
        f"kl={format_real(final.kl)} total={format_real(final.total)}"
    )
    if summary["iou"] is not None:
        print(f"iou: {format_real(summary['iou'])}")
        deltas = summary["delta_history"]
        if deltas is not None:
            shown = " ".join(format_real(d) for d in deltas[: hp.t_pi + 1])
            print(f"delta trajectory (t=0..{hp.t_pi}): {shown}")
    print(f"wall time: {result.wall_time:.3f}s", file=sys.stderr)
    return 0


def _cmd_bench(args) -> int:
    source = _resolve_source(args)
    hp = _hp_from_args(args)
    report = run_benchmark(
        source, hp, runs=args.runs, tasks_per_run=args.tasks_per_run, seed=args.seed, jobs=args.jobs
    )
    dest = _emit_report(to_canonical_json(report.as_dict()) + "\n", args.out)
    if args.delta_csv and report.delta_pairs is not None:
        lines = ["task,delta0,delta_tpi\n"]
        lines += [
            f"{i},{format_real(d0)},{format_real(dt)}\n"
            for i, (d0, dt) in enumerate(report.delta_pairs)
        ]
        _write_text(args.delta_csv, "".join(lines))
    print(f"mean mIoU: {format_real(report.mean_miou)}", file=dest)
    print(f"throughput: {report.tasks_per_second:.2f} tasks/s", file=sys.stderr)
    return 0


def _cmd_ablate(args) -> int:
    source = _resolve_source(args)
    hp = _hp_from_args(args)
    names = [n.strip().lower() for n in args.ablate_losses.split(",") if n.strip()]
    rows = []
    for name in names:
        selector = _SELECTOR_NAMES.get(name)
        if selector is None:
            raise RepriError(f"unknown loss selector {name!r} in --losses")
        hp_s = dataclasses.replace(hp, loss_selector=selector)
        report = run_benchmark(
            source, hp_s, runs=1, tasks_per_run=args.n_tasks, seed=args.seed, jobs=args.jobs
        )
        rows.append({"losses": name, "mean_miou": report.mean_miou})
    payload = {
        "config": {
            "hyperparams": hyperparams_dict(hp),
            "seed": args.seed,
            "n_tasks": args.n_tasks,
            "source": repr(source),
        },
        "rows": rows,
    }
    dest = _emit_report(to_canonical_json(payload) + "\n", args.out)
    for row in rows:
        print(f"{row['losses']:>8}: mean mIoU {format_real(row['mean_miou'])}", file=dest)
    return 0


def _cmd_sweep(args) -> int:
    source = _resolve_source(args)
    hp = _hp_from_args(args)
    deltas = _parse_deltas(args.deltas)
    from .evaluation import perturbation_sweep

    rows = perturbation_sweep(source, hp, deltas, n_tasks=args.n_tasks, seed=args.seed, jobs=args.jobs)
    payload = {
        "config": {
            "hyperparams": hyperparams_dict(hp),
            "seed": args.seed,
            "n_tasks": args.n_tasks,
            "deltas": deltas,
            "source": repr(source),
        },
        "rows": rows,
    }
    dest = _emit_report(to_canonical_json(payload) + "\n", args.out)
    if args.csv:
        lines = ["delta,mean_miou\n"]
        lines += [f"{format_real(r['delta'])},{format_real(r['mean_miou'])}\n" for r in rows]
        _write_text(args.csv, "".join(lines))
    for row in rows:
        print(f"delta {row['delta']:+.3f}: mean mIoU {format_real(row['mean_miou'])}", file=dest)
    return 0


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        height=args.height,
        width=args.width,
        channels=args.channels,
        noise_sigma=args.noise_sigma,
        fg_proportion_range=(args.fg_lo, args.fg_hi),
        fg_mean_scale=args.fg_angle,
        support_query_shift=args.shift,
        k=args.shots,
        n_classes=args.n_classes,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        class_id, task = synth_episode(cfg, derive_seed(args.seed, i))
        write_task_container(out / f"task_{i:05d}.rpri", task, class_id=class_id)
    print(f"wrote {args.n} task containers to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    trials = []
    worst = 0.0
    for i in range(args.trials):
        errors = gradcheck_trial(derive_seed(args.seed, i), h=args.h)
        trials.append({"trial": i, **errors})
        worst = max(worst, *errors.values())
    worst = float(worst)
    passed = worst < GRADCHECK_TOLERANCE
    payload = {
        "config": {"trials": args.trials, "seed": args.seed, "h": args.h,
                   "tolerance": GRADCHECK_TOLERANCE},
        "trials": trials,
        "max_relative_error": worst,
        "passed": passed,
    }
    text = to_canonical_json(payload) + "\n"
    if args.out:
        _write_text(args.out, text)
    print(f"gradcheck: max relative error {format_real(worst)} over {args.trials} trials "
          f"({'PASS' if passed else 'FAIL'} at {GRADCHECK_TOLERANCE:g})")
    return 0 if passed else 2


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="repri", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", parents=[], help="run inference on one task container",
                       description="Optimise the classifier on one task and emit the "
                                   "posterior map, predicted mask, and a JSON summary "
                                   "with the full loss/pi/delta trajectories.")
    p.add_argument("--task", required=True, help="path to a .rpri task container")
    p.add_argument("--out", default=None, help="output container for the probability map")
    p.add_argument("--summary", default=None, help="output path for the JSON summary")
    _add_hp_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("bench", help="episodic benchmark (runs x tasks)",
                       description="Run the episodic benchmark protocol and write a "
                                   "deterministic JSON report (timing goes to stderr only).")
    _add_source_flags(p)
    p.add_argument("--runs", type=int, default=5, help="independent runs (default 5)")
    p.add_argument("--tasks-per-run", type=int, default=1000, help="tasks per run (default 1000)")
    p.add_argument("--seed", type=int, default=0, help="benchmark seed (default 0)")
    p.add_argument("--jobs", type=int, default=_jobs_default(),
                   help="parallel workers; output is identical for any value (default $REPRI_JOBS or 1)")
    p.add_argument("--out", default=None, help="report path (default: stdout)")
    p.add_argument("--delta-csv", default=None,
                   help="optional CSV of per-task size errors (columns: task,delta0,delta_tpi)")
    _add_hp_flags(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="compare loss configurations on identical tasks",
                       description="Benchmark each requested loss selector on the "
                                   "byte-identical task set and report mean IoU per row.")
    _add_source_flags(p)
    p.add_argument("--losses", dest="ablate_losses", default="ce,ce+h,full",
                   help="comma list of selectors to compare (default ce,ce+h,full)")
    p.add_argument("--n-tasks", type=int, default=500, help="tasks per selector (default 500)")
    p.add_argument("--seed", type=int, default=0, help="task-set seed (default 0)")
    p.add_argument("--jobs", type=int, default=_jobs_default(),
                   help="parallel workers (default $REPRI_JOBS or 1)")
    p.add_argument("--out", default=None, help="report path (default: stdout)")
    _add_hp_flags(p, include_selector=False)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="mean IoU versus enforced proportion error",
                       description="Run the same task set in perturbed-oracle mode for "
                                   "every delta and tabulate mean IoU (CSV columns: "
                                   "delta,mean_miou).")
    _add_source_flags(p)
    p.add_argument("--deltas", default="-0.5:1.0:0.25",
                   help="comma list or inclusive lo:hi:step grid (default -0.5:1.0:0.25)")
    p.add_argument("--n-tasks", type=int, default=200, help="tasks per delta (default 200)")
    p.add_argument("--seed", type=int, default=0, help="task-set seed (default 0)")
    p.add_argument("--jobs", type=int, default=_jobs_default(),
                   help="parallel workers (default $REPRI_JOBS or 1)")
    p.add_argument("--out", default=None, help="report path (default: stdout)")
    p.add_argument("--csv", default=None, help="optional plot-ready CSV path")
    _add_hp_flags(p)
    p.set_defaults(func=_cmd_sweep)
    # let "--deltas -0.5:1.0:0.25" parse: grids and comma lists that start
    # with a minus sign must count as values, not option strings
    p._negative_number_matcher = re.compile(r"^-(\d+\.?\d*|\.\d+)([,:].*)?$")

    p = sub.add_parser("synth", help="generate synthetic task containers",
                       description="Write deterministic synthetic episodes as .rpri "
                                   "task containers for use with --tasks <dir>.")
    p.add_argument("--n", type=int, required=True, help="number of tasks to generate")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--height", type=int, default=16, help="feature rows (default 16)")
    p.add_argument("--width", type=int, default=16, help="feature columns (default 16)")
    p.add_argument("--channels", type=int, default=16, help="feature channels (default 16)")
    p.add_argument("--shots", type=int, default=1, help="supports per task (default 1)")
    p.add_argument("--shift", type=float, default=0.0,
                   help="support/query distribution mismatch in [0, 1] (default 0)")
    p.add_argument("--noise-sigma", type=float, default=0.25, help="feature noise (default 0.25)")
    p.add_argument("--fg-lo", type=float, default=0.1, help="min foreground proportion (default 0.1)")
    p.add_argument("--fg-hi", type=float, default=0.4, help="max foreground proportion (default 0.4)")
    p.add_argument("--fg-angle", type=float, default=1.0,
                   help="foreground/background direction angle in right-angle units (default 1)")
    p.add_argument("--n-classes", type=int, default=8, help="synthetic class count (default 8)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("gradcheck", help="certify analytic gradients against finite differences",
                       description="Random seeded configurations; every loss term and the "
                                   "weighted total must match central differences within "
                                   f"{GRADCHECK_TOLERANCE:g} relative error, else exit 2.")
    p.add_argument("--trials", type=int, default=100, help="number of random configurations (default 100)")
    p.add_argument("--seed", type=int, default=0, help="trial seed (default 0)")
    p.add_argument("--h", type=float, default=1e-4, help="finite-difference step (default 1e-4)")
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RepriError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
