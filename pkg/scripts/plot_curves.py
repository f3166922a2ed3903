#!/usr/bin/env python3
"""Plot per-task test accuracy against training step from one or more metrics.csv files.

    python scripts/plot_curves.py runs/synthetic-ecla/metrics.csv --out curves.png

Needs matplotlib, which the core package does not depend on.
"""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load(path):
    curves = defaultdict(list)
    boundaries = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            step, learning, task = int(row["step"]), int(row["learning_task"]), int(row["eval_task"])
            curves[task].append((step, float(row["accuracy"])))
            boundaries.setdefault(learning, step)
    return curves, boundaries


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("metrics", nargs="+")
    parser.add_argument("--out", default="curves.png")
    args = parser.parse_args()

    fig, axes = plt.subplots(1, len(args.metrics), figsize=(5 * len(args.metrics), 3.5), squeeze=False)
    for ax, path in zip(axes[0], args.metrics):
        curves, boundaries = load(path)
        for task, points in sorted(curves.items()):
            steps, acc = zip(*points)
            ax.plot(steps, acc, label=f"task {task}")
        for learning, step in boundaries.items():
            if learning > 1:
                ax.axvline(step, color="grey", lw=0.5, ls="--")
        ax.set_title(path)
        ax.set_xlabel("step")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
