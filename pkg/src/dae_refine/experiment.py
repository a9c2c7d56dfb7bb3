"""Experiment pipeline: each step reads its prerequisites from, and writes its outputs to, one run directory.

Layout of a run directory::

    config.json                   echo of the experiment config
    manifest_<command>.json       config hash, seed, library versions
    corpus/                       meta.json + train/val/test.cstn
    segmenter/                    meta.json + weights.cstn
    dae_prediction/, dae_groundtruth/
    sweep_<scenario>.csv          (epsilon, iteration, mean_iou) surface
    sweep_best.json               chosen (epsilon, iterations) per scenario
    crf.json                      tuned CRF parameters
    eval.csv                      feedforward / +CRF / +DAE(y_true) / +DAE(y)
    scorefield.csv, toy_dae/      2-D score field of the toy density task
    oracle_check.csv
"""

from __future__ import annotations

import csv
import json
import platform
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import crf as C
from . import dae as A
from . import datagen as D
from . import inference as I
from . import metrics as M
from . import oracle as O
from . import segmenter as S
from .config import ExperimentConfig

SCENARIOS = ("prediction", "groundtruth")
EVAL_ROWS = ("feedforward", "+CRF", "+DAE(y_true)", "+DAE(y)")


class MissingPrerequisite(FileNotFoundError):
    """A step was asked to run before the step that produces its input."""


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; run `{producer}` first")
    return path


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "dae_refine": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def check_config_matches(out: Path, cfg: ExperimentConfig) -> None:
    """Refuse to mix artefacts from a different config in one run directory."""
    echo = out / "config.json"
    if echo.exists() and ExperimentConfig.load(echo).digest() != cfg.digest():
        raise ValueError(f"{out} holds artefacts of a different config; use a fresh --out directory")


# ---------------------------------------------------------------------------
# steps


def run_datagen(cfg: ExperimentConfig, out: Path) -> None:
    splits = D.generate(cfg.corpus)
    D.save_corpus(out / "corpus", cfg.corpus, splits)


def load_corpus(out: Path):
    _require(out / "corpus" / "meta.json", "datagen")
    return D.load_corpus(out / "corpus")[1]


def run_train_segmenter(cfg: ExperimentConfig, out: Path, log=None) -> S.SegmenterModel:
    train, val, _ = load_corpus(out)
    seed = cfg.seed_for("segmenter")
    model = S.SegmenterModel.init(cfg.segmenter.model, seed)
    S.train_segmenter(model, train, val, cfg.segmenter.schedule, seed, augment=cfg.segmenter.augment, log=log)
    model.save(out / "segmenter")
    return model


def load_segmenter(out: Path) -> S.SegmenterModel:
    _require(out / "segmenter" / "meta.json", "train-segmenter")
    return S.SegmenterModel.load(out / "segmenter")


def run_train_dae(cfg: ExperimentConfig, out: Path, scenario: str, log=None) -> A.DaeModel:
    scenario = A.Scenario(scenario).value
    train, val, _ = load_corpus(out)
    segmenter = load_segmenter(out)
    corruption = A.CorruptionConfig(cfg.dae.sigma(scenario), stream=SCENARIOS.index(scenario))
    model, _ = A.train_dae(
        scenario,
        segmenter,
        train,
        val,
        cfg.dae.model,
        corruption,
        cfg.dae.schedule,
        cfg.seed_for(f"dae.{scenario}"),
        weights=cfg.dae.loss,
        augment=cfg.dae.augment,
        log=log,
    )
    model.save(out / f"dae_{scenario}")
    return model


def load_dae(out: Path, scenario: str) -> A.DaeModel:
    _require(out / f"dae_{scenario}" / "meta.json", f"train-dae --scenario {scenario}")
    return A.DaeModel.load(out / f"dae_{scenario}")


def run_sweep(cfg: ExperimentConfig, out: Path, scenarios=SCENARIOS) -> dict[str, I.SweepResult]:
    _, val, _ = load_corpus(out)
    segmenter = load_segmenter(out)
    models = {s: load_dae(out, s) for s in scenarios}
    feats = A.extract_features(segmenter, val)
    results = {}
    for scenario, model in models.items():
        res = I.sweep(model, feats.y, feats.h, feats.labels, cfg.inference)
        I.write_surface_csv(out / f"sweep_{scenario}.csv", res)
        results[scenario] = res
    best_path = out / "sweep_best.json"
    best = json.loads(best_path.read_text()) if best_path.exists() else {}
    best.update({s: r.to_dict() for s, r in results.items()})
    best_path.write_text(json.dumps(best, indent=2, sort_keys=True) + "\n")
    return results


def run_tune_crf(cfg: ExperimentConfig, out: Path) -> C.GridCrfConfig:
    _, val, _ = load_corpus(out)
    feats = A.extract_features(load_segmenter(out), val)
    best, iou = C.tune(feats.y, feats.labels, cfg.crf.grid())
    (out / "crf.json").write_text(json.dumps({"config": asdict(best), "val_mean_iou": iou}, indent=2) + "\n")
    return best


def evaluate_rows(cfg: ExperimentConfig, out: Path) -> list[tuple[str, M.ConfusionMatrix]]:
    """Test-set confusion matrices for the four compared pipelines."""
    _, _, test = load_corpus(out)
    segmenter = load_segmenter(out)
    best = json.loads(_require(out / "sweep_best.json", "sweep").read_text())
    crf_path = out / "crf.json"
    crf_cfg = C.GridCrfConfig(**json.loads(crf_path.read_text())["config"]) if crf_path.exists() else run_tune_crf(cfg, out)
    feats = A.extract_features(segmenter, test)
    k = cfg.corpus.n_classes
    rows = [("feedforward", M.confusion(feats.labels, S.predict_argmax(feats.y), k))]
    rows.append(("+CRF", M.confusion(feats.labels, C.meanfield(feats.y, crf_cfg).argmax(axis=1), k)))
    for name, scenario in (("+DAE(y_true)", "groundtruth"), ("+DAE(y)", "prediction")):
        if scenario not in best:
            raise MissingPrerequisite(f"no sweep result for {scenario}; run `sweep` first")
        model = load_dae(out, scenario)
        traj = I.refine(feats.y, feats.h, model, best[scenario]["epsilon"], best[scenario]["iterations"], keep_iterates=False)
        rows.append((name, M.confusion(feats.labels, S.predict_argmax(traj.final), k)))
    return rows


def run_eval(cfg: ExperimentConfig, out: Path) -> list[tuple[str, M.ConfusionMatrix]]:
    rows = evaluate_rows(cfg, out)
    M.write_report(out / "eval.csv", rows, D.CLASS_NAMES)
    return rows


# ---------------------------------------------------------------------------
# toy density task


def toy_mixture(cfg: ExperimentConfig) -> O.GaussianMixture:
    return O.GaussianMixture.from_dict(cfg.toy.mixture)


def train_toy_dae(cfg: ExperimentConfig) -> A.DaeModel:
    toy = cfg.toy
    gm = toy_mixture(cfg)
    data = O.sample(gm, toy.n_train, cfg.seed_for("toy.train"))
    val = O.sample(gm, toy.n_val, cfg.seed_for("toy.val"))
    model, _ = A.train_dense_dae(
        data, val, toy.model, A.CorruptionConfig(toy.sigma), toy.schedule, cfg.seed_for("toy.dae")
    )
    return model


def toy_model(cfg: ExperimentConfig, out: Path) -> A.DaeModel:
    """The trained toy DAE of this run directory, training it on first use."""
    path = out / "toy_dae"
    if (path / "meta.json").exists():
        return A.DaeModel.load(path)
    model = train_toy_dae(cfg)
    model.save(path)
    return model


def run_scorefield(cfg: ExperimentConfig, out: Path) -> np.ndarray:
    """Learned and oracle scores on a regular grid, one CSV row per grid point."""
    toy = cfg.toy
    model = toy_model(cfg, out)
    gm = toy_mixture(cfg)
    xs = np.linspace(toy.grid_lo[0], toy.grid_hi[0], toy.grid_size)
    ys = np.linspace(toy.grid_lo[1], toy.grid_hi[1], toy.grid_size)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    learned = A.score(model, pts).field
    exact = O.smoothed_score(gm, toy.sigma, pts)
    with open(out / "scorefield.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y0", "y1", "score0", "score1", "oracle0", "oracle1"])
        for p, s, o in zip(pts, learned, exact):
            w.writerow([f"{p[0]:.6f}", f"{p[1]:.6f}", *(f"{v:.6f}" for v in (*s, *o))])
    return learned


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def score_fidelity(cfg: ExperimentConfig, model: A.DaeModel) -> float:
    """Mean cosine between learned and oracle smoothed scores above the 10th density percentile."""
    gm = toy_mixture(cfg)
    pts = O.sample(gm.smoothed(cfg.toy.sigma), cfg.toy.n_test, cfg.seed_for("toy.test"))
    logp = O.smoothed_log_density(gm, cfg.toy.sigma, pts)
    keep = logp >= np.percentile(logp, 10)
    return float(np.mean(cosine(A.score(model, pts[keep]).field, O.smoothed_score(gm, cfg.toy.sigma, pts[keep]))))


def mode_seeking(cfg: ExperimentConfig, model: A.DaeModel) -> tuple[float, np.ndarray]:
    """Fraction of random starts whose refinement ends within 0.1 of an oracle mode, and the modes."""
    toy = cfg.toy
    gm = toy_mixture(cfg)
    modes = O.find_modes(gm, toy.sigma, toy.grid_lo, toy.grid_hi)
    rng = np.random.default_rng(cfg.seed_for("toy.starts"))
    starts = rng.uniform(toy.grid_lo, toy.grid_hi, size=(toy.n_starts, 2))
    traj = I.refine_density(starts, model, toy.epsilon, toy.n_steps)
    dist = np.min(np.linalg.norm(traj[-1][:, None] - modes[None], axis=-1), axis=1)
    return float(np.mean(dist <= 0.1)), modes


def oracle_checks(cfg: ExperimentConfig, out: Path | None = None, model: A.DaeModel | None = None) -> list[tuple[str, float, str, bool]]:
    """(name, value, threshold, passed) for every oracle invariant."""
    rng = np.random.default_rng(cfg.seed_for("oracle.check"))
    checks = []
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(1, 5))
        w = rng.dirichlet(np.ones(k))
        gm = O.GaussianMixture(w / w.sum(), rng.uniform(-3, 3, (k, 2)), rng.uniform(0.05, 1.5, (k, 2)))
        sigma = float(rng.uniform(0.05, 1.0))
        y = rng.uniform(-5, 5, (1000, 2))
        diff = O.optimal_denoiser(gm, sigma, y) - y - sigma**2 * O.smoothed_score(gm, sigma, y)
        worst = max(worst, float(np.max(np.abs(diff))))
    checks.append(("tweedie_max_abs_error", worst, "< 1e-10", worst < 1e-10))
    gm = toy_mixture(cfg)
    pts = rng.uniform(cfg.toy.grid_lo, cfg.toy.grid_hi, (200, 2))
    lim = float(np.max(np.abs(O.smoothed_score(gm, 1e-4, pts) - O.analytic_score(gm, pts))))
    checks.append(("small_sigma_limit_max_abs_error", lim, "< 1e-3", lim < 1e-3))
    if model is None and out is not None:
        model = toy_model(cfg, out)
    if model is not None:
        cos = score_fidelity(cfg, model)
        checks.append(("learned_score_mean_cosine", cos, ">= 0.95", cos >= 0.95))
        frac, _ = mode_seeking(cfg, model)
        checks.append(("mode_seeking_fraction", frac, ">= 0.9", frac >= 0.9))
    return checks


def run_oracle_check(cfg: ExperimentConfig, out: Path) -> list[tuple[str, float, str, bool]]:
    checks = oracle_checks(cfg, out)
    with open(out / "oracle_check.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "value", "threshold", "passed"])
        for name, value, thr, ok in checks:
            w.writerow([name, f"{value:.6g}", thr, "pass" if ok else "fail"])
    return checks
