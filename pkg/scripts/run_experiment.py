"""Run the full segmentation pipeline for several master seeds and summarise the comparisons.

    python scripts/run_experiment.py --config configs/acceptance.json --seeds 0 1 2 3 4 --out runs/acceptance

Each seed gets its own run directory ``<out>/seed<k>``; existing artefacts are
reused, so an interrupted run can be resumed.  A per-seed summary is written
to ``<out>/summary.csv``.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

from dae_refine import experiment as E
from dae_refine import metrics as M
from dae_refine.config import ExperimentConfig

FIELDS = ["seed", "row", "mean_iou", "fence_iou", "seconds"]


def run_seed(cfg: ExperimentConfig, out: Path, log=None) -> tuple[list, float]:
    t0 = time.perf_counter()
    E.check_config_matches(out, cfg)
    E.write_manifest(out, cfg, "run_experiment")
    if not (out / "corpus" / "meta.json").exists():
        E.run_datagen(cfg, out)
    if not (out / "segmenter" / "meta.json").exists():
        E.run_train_segmenter(cfg, out, log=log)
    for scenario in E.SCENARIOS:
        if not (out / f"dae_{scenario}" / "meta.json").exists():
            E.run_train_dae(cfg, out, scenario, log=log)
    if not (out / "sweep_best.json").exists():
        E.run_sweep(cfg, out)
    rows = E.run_eval(cfg, out)
    return rows, time.perf_counter() - t0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", type=Path, default=Path("runs/experiment"))
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args(argv)
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    log = (lambda m: print(m, file=sys.stderr, flush=True)) if args.verbose else None
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for seed in args.seeds:
            rows, secs = run_seed(base.with_seed(seed), args.out / f"seed{seed}", log)
            for name, cm in rows:
                w.writerow([seed, name, f"{M.mean_iou(cm):.6f}", f"{M.iou_per_class(cm)[-1]:.6f}", f"{secs:.1f}"])
                print(f"seed {seed} {name:14s} mean_iou {M.mean_iou(cm):.4f} fence {M.iou_per_class(cm)[-1]:.4f}")
            print(f"seed {seed} done in {secs:.0f} s", flush=True)
            fh.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
