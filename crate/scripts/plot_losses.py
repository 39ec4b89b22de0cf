#!/usr/bin/env python3
"""Plot the per-iteration loss curves from a run's losses.csv.

Usage: plot_losses.py RUN_DIR [-o OUT.png]

The CSV has columns stage,iter,loss; one curve is drawn per stage on a
log-scale y axis.
"""

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path, help="pipeline output directory")
    ap.add_argument("-o", "--out", type=Path, default=None,
                    help="output image (default: RUN_DIR/losses.png)")
    args = ap.parse_args()

    csv_path = args.run_dir / "losses.csv"
    if not csv_path.exists():
        print(f"error: {csv_path} not found", file=sys.stderr)
        return 2

    curves = defaultdict(list)
    with open(csv_path, newline="") as f:
        for row in csv.DictReader(f):
            curves[row["stage"]].append((int(row["iter"]), float(row["loss"])))

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for stage in sorted(curves):
        pts = sorted(curves[stage])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=stage)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()

    out = args.out or args.run_dir / "losses.png"
    fig.savefig(out, dpi=150)
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
