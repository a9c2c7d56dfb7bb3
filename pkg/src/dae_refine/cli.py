"""Command line entry point.

Every command takes ``--config PATH`` (JSON, optional), ``--out DIR`` and
``--seed N``; the last two override the config.  Exit status is 0 on success,
2 when the config or arguments are invalid and 3 when a prerequisite artefact
is missing from the run directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiment as E
from . import metrics as M
from .config import ConfigError, ExperimentConfig

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_MISSING = 3


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _datagen(cfg, out, args):
    E.run_datagen(cfg, out)
    _log(f"corpus written to {out / 'corpus'}")


def _train_segmenter(cfg, out, args):
    model = E.run_train_segmenter(cfg, out, log=_log)
    _log(f"validation mean IoU {model.history['val_mean_iou']:.4f}")


def _train_dae(cfg, out, args):
    model = E.run_train_dae(cfg, out, args.scenario, log=_log)
    hist = model.meta["history"]
    _log(f"DAE({args.scenario}) saved, best validation loss {hist['val_loss'][hist['best_epoch']]:.5f}")


def _sweep(cfg, out, args):
    scenarios = E.SCENARIOS if args.scenario is None else (args.scenario,)
    for scenario, res in E.run_sweep(cfg, out, scenarios).items():
        print(f"{scenario}: epsilon={res.best_epsilon:g} iterations={res.best_iters} mean_iou={res.best_iou:.4f}")


def _eval(cfg, out, args):
    rows = E.run_eval(cfg, out)
    for name, cm in rows:
        print(f"{name:14s} mean_iou={M.mean_iou(cm):.4f} fence_iou={M.iou_per_class(cm)[-1]:.4f}")


def _scorefield(cfg, out, args):
    E.run_scorefield(cfg, out)
    print(f"score field written to {out / 'scorefield.csv'}")


def _oracle_check(cfg, out, args):
    checks = E.run_oracle_check(cfg, out)
    for name, value, thr, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name} = {value:.6g} ({thr})")
    return 0 if all(c[3] for c in checks) else 1


COMMANDS = {
    "datagen": _datagen,
    "train-segmenter": _train_segmenter,
    "train-dae": _train_dae,
    "sweep": _sweep,
    "eval": _eval,
    "scorefield": _scorefield,
    "oracle-check": _oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dae-refine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults apply to missing fields)")
        p.add_argument("--out", type=Path, help="run directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides seed)")
        if name == "train-dae":
            p.add_argument("--scenario", choices=E.SCENARIOS, required=True)
        elif name == "sweep":
            p.add_argument("--scenario", choices=E.SCENARIOS, default=None)
    return parser


def resolve_config(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    return cfg, out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        cfg, out = resolve_config(args)
        E.check_config_matches(out, cfg)
    except (ConfigError, ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID
    _log(cfg.to_json().rstrip())
    try:
        scenario = getattr(args, "scenario", None)
        E.write_manifest(out, cfg, args.command if scenario is None else f"{args.command}_{scenario}")
        status = COMMANDS[args.command](cfg, out, args)
    except E.MissingPrerequisite as exc:
        _log(f"error: {exc}")
        return EXIT_MISSING
    except ConfigError as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
