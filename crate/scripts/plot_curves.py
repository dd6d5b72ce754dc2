#!/usr/bin/env python3
"""Render loss curves from a run directory of ARM_epsEPS_seedSEED.csv files.

One figure per epsilon: median adversarial-evaluation loss per arm across
seeds, with min/max bands. Usage:

    python3 scripts/plot_curves.py OUT_DIR [--out PLOT_DIR] [--column adv_eval_loss]
"""

import argparse
import csv
import re
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

CELL_RE = re.compile(r"^(?P<arm>.+)_eps(?P<eps>[0-9.]+)_seed(?P<seed>\d+)\.csv$")

ARM_ORDER = ["L2L", "L2L-Transfer", "Transfer-NOT", "ADAM"]


def load_cells(run_dir: Path, column: str):
    cells = defaultdict(lambda: defaultdict(list))  # eps -> arm -> [series]
    for path in sorted(run_dir.glob("*.csv")):
        m = CELL_RE.match(path.name)
        if not m:
            continue
        with path.open() as f:
            rows = list(csv.DictReader(f))
        series = [float(r[column]) for r in rows]
        cells[m.group("eps")][m.group("arm")].append(series)
    return cells


def median(xs):
    ys = sorted(xs)
    n = len(ys)
    mid = n // 2
    return ys[mid] if n % 2 else 0.5 * (ys[mid - 1] + ys[mid])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--column", default="adv_eval_loss",
                    choices=["train_loss", "adv_eval_loss"])
    args = ap.parse_args()
    out_dir = args.out or args.run_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)

    cells = load_cells(args.run_dir, args.column)
    if not cells:
        raise SystemExit(f"no cell CSVs in {args.run_dir}")

    for eps, arms in sorted(cells.items(), key=lambda kv: float(kv[0])):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for arm in ARM_ORDER + sorted(set(arms) - set(ARM_ORDER)):
            runs = arms.get(arm)
            if not runs:
                continue
            steps = range(len(runs[0]))
            med = [median([r[t] for r in runs]) for t in steps]
            lo = [min(r[t] for r in runs) for t in steps]
            hi = [max(r[t] for r in runs) for t in steps]
            (line,) = ax.plot(steps, med, label=f"{arm} (n={len(runs)})")
            ax.fill_between(steps, lo, hi, alpha=0.15, color=line.get_color())
        ax.set_xlabel("optimizee step")
        ax.set_ylabel(args.column.replace("_", " "))
        ax.set_title(f"epsilon = {eps}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        target = out_dir / f"eps{eps}_{args.column}.png"
        fig.savefig(target, dpi=150)
        plt.close(fig)
        print(f"wrote {target}")


if __name__ == "__main__":
    main()
