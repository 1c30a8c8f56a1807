"""Plot MSE against the truncation level from a ``positivity-ctmle sweep`` CSV.

    python scripts/plot_sweep.py sweep.csv --out sweep.png
"""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load(path, metric):
    curves = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            curves[row["estimator"]].append((float(row["gamma"]), float(row[metric])))
    return curves


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("csv")
    parser.add_argument("--out", default="sweep.png")
    parser.add_argument("--metric", default="mse", choices=("mse", "bias", "se"))
    parser.add_argument("--log", action="store_true", help="logarithmic y axis")
    args = parser.parse_args(argv)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, points in load(args.csv, args.metric).items():
        points.sort()
        ax.plot([g for g, _ in points], [v for _, v in points], marker=".", label=name)
    ax.set_xlabel("truncation level gamma")
    ax.set_ylabel(args.metric)
    if args.log:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
