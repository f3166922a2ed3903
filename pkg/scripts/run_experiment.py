#!/usr/bin/env python3
"""Run one config for several methods and seeds; print final accuracies and forgetting.

    python scripts/run_experiment.py configs/synthetic.yaml --methods ECLA BP FR CLEER --seeds 0 1 2

Each (method, seed) run writes its usual outputs under ``<output_dir>/<method>-seed<seed>``.
"""

import argparse
from pathlib import Path

import numpy as np

from ecla import cli
from ecla.trainer import forgetting_metrics


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--methods", nargs="+", default=["ECLA", "BP"])
    parser.add_argument("--seeds", nargs="+", type=int, default=[0])
    args = parser.parse_args()

    summary = {}
    for method in args.methods:
        for seed in args.seeds:
            cfg = cli.load_config(args.config, seed)
            cfg.method = method
            base = cli.validate(cfg)
            out = Path(base) / f"{method}-seed{seed}"
            result = cli.run_experiment(cfg, out)
            m = result.matrix.entries
            summary.setdefault(method, []).append((m[-1, 0], forgetting_metrics(m)))
            print(f"{method:6s} seed {seed}: task-1 accuracy per stage {np.round(m[:, 0], 3).tolist()} -> {out}")

    print("\nmethod  final task-1 acc  final avg acc  avg forgetting")
    for method, rows in summary.items():
        t1 = np.mean([r[0] for r in rows])
        avg = np.mean([r[1]["final_avg"] for r in rows])
        forget = np.mean([r[1]["avg_forgetting"] for r in rows])
        print(f"{method:6s}  {t1:16.3f}  {avg:13.3f}  {forget:14.3f}")


if __name__ == "__main__":
    main()
