#!/usr/bin/env python3
"""Sensitivity of the final mean IoU to the schedule switch iteration.

Re-runs the benchmark with the proportion-update iteration varied over a
grid (everything else at defaults) and writes mean IoU per setting.
"""

import argparse
import dataclasses
import os

from repri.core import Hyperparams
from repri.evaluation import SynthTaskSource, format_real, mismatch_suite_config, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-tasks", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--shots", type=int, default=1)
    ap.add_argument("--t-pi", default="1,2,5,10,15,20,30,40,50",
                    help="comma list of switch iterations")
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--csv", default="tpi_sweep.csv")
    args = ap.parse_args()

    source = SynthTaskSource(mismatch_suite_config(k=args.shots))
    with open(args.csv, "w", encoding="utf-8") as fh:
        fh.write("t_pi,mean_miou\n")
        for t_pi in (int(x) for x in args.t_pi.split(",")):
            hp = dataclasses.replace(Hyperparams(), t_pi=t_pi)
            report = run_benchmark(source, hp, runs=1, tasks_per_run=args.n_tasks,
                                   seed=args.seed, jobs=args.jobs)
            print(f"t_pi {t_pi:>3}: mean mIoU {report.mean_miou * 100:.1f}")
            fh.write(f"{t_pi},{format_real(report.mean_miou)}\n")
    print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
