"""Print the epsilon / iteration surface stored in a run directory.

    python scripts/sweep_surface.py runs/acceptance/seed0 [--scenario prediction]

For each epsilon: the iteration with the best validation mean IoU, that IoU,
and the IoU at iteration 0 (the feedforward prediction).  The last lines give
the two trade-off statistics: whether the best iteration is non-increasing in
epsilon, and the spread of the per-epsilon maxima.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from dae_refine.inference import read_surface_csv


def summarise(surface: dict[float, list[float]]) -> list[str]:
    lines = [f"{'epsilon':>8} {'best_it':>7} {'max_iou':>8} {'iou_it0':>8}"]
    argmax = []
    peaks = []
    for eps in sorted(surface):
        row = np.asarray(surface[eps])
        argmax.append(int(np.argmax(row)))
        peaks.append(float(row.max()))
        lines.append(f"{eps:8g} {argmax[-1]:7d} {peaks[-1]:8.4f} {row[0]:8.4f}")
    monotone = all(a >= b for a, b in zip(argmax, argmax[1:]))
    lines.append(f"best iteration non-increasing in epsilon: {monotone}")
    lines.append(f"spread of maxima: {max(peaks) - min(peaks):.4f}")
    return lines


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--scenario", choices=("prediction", "groundtruth"), default="prediction")
    args = ap.parse_args(argv)
    path = args.run_dir / f"sweep_{args.scenario}.csv"
    if not path.exists():
        print(f"{path} not found; run `dae-refine sweep` first", file=sys.stderr)
        return 3
    print("\n".join(summarise(read_surface_csv(path))))
    return 0


if __name__ == "__main__":
    sys.exit(main())
