"""JSON experiment configuration and named seed streams."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from .crf import GridCrfConfig
from .dae import ConvDaeConfig, DenseDaeConfig, LossWeights
from .datagen import CorpusSpec
from .inference import InferenceConfig
from .optim import TrainSchedule
from .segmenter import SegmenterConfig


class ConfigError(ValueError):
    """Raised for any malformed or inconsistent experiment configuration."""


def stream_seed(master: int, name: str) -> int:
    """A 32-bit seed for the component ``name``, derived from the master seed."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class SegmenterSettings:
    model: SegmenterConfig = field(default_factory=SegmenterConfig)
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(max_epochs=40, patience_epochs=10))
    augment: bool = True


@dataclass(frozen=True)
class DaeSettings:
    model: ConvDaeConfig = field(default_factory=lambda: ConvDaeConfig(channels=(16, 32, 64)))
    sigma_prediction: float = 0.1
    sigma_groundtruth: float = 0.5
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(max_epochs=40, patience_epochs=10))
    loss: LossWeights = field(default_factory=LossWeights)
    augment: bool = True

    def sigma(self, scenario: str) -> float:
        return self.sigma_prediction if scenario == "prediction" else self.sigma_groundtruth


@dataclass(frozen=True)
class CrfSearch:
    """Validation grid for the CRF baseline."""

    weights: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    neighborhoods: tuple[int, ...] = (4, 8)
    iterations: tuple[int, ...] = (1, 3, 5, 10)
    spatial_sigmas: tuple[float, ...] = (0.5, 1.0)

    def grid(self) -> list[GridCrfConfig]:
        from .crf import config_grid

        return config_grid(self.weights, self.neighborhoods, self.iterations, self.spatial_sigmas)


@dataclass(frozen=True)
class ToySettings:
    """The unconditional 2-D density task behind ``scorefield`` and the oracle checks."""

    mixture: dict = field(
        default_factory=lambda: {
            "weights": [0.5, 0.5],
            "means": [[-1.0, 0.0], [1.0, 0.0]],
            "variances": [[0.04, 0.04], [0.04, 0.04]],
        }
    )
    sigma: float = 0.1
    n_train: int = 10_000
    n_val: int = 2000
    n_test: int = 4000
    model: DenseDaeConfig = field(default_factory=DenseDaeConfig)
    schedule: TrainSchedule = field(
        default_factory=lambda: TrainSchedule(batch_size=100, patience_epochs=30, weight_decay=0.0)
    )
    grid_lo: tuple[float, float] = (-2.0, -1.0)
    grid_hi: tuple[float, float] = (2.0, 1.0)
    grid_size: int = 21
    epsilon: float = 0.05
    n_steps: int = 50
    n_starts: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    segmenter: SegmenterSettings = field(default_factory=SegmenterSettings)
    dae: DaeSettings = field(default_factory=DaeSettings)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    crf: CrfSearch = field(default_factory=CrfSearch)
    toy: ToySettings = field(default_factory=ToySettings)
    out_dir: str = "runs/default"

    def __post_init__(self):
        # the corpus follows the master seed like every other component
        object.__setattr__(self, "corpus", replace(self.corpus, seed=stream_seed(self.seed, "corpus")))

    def seed_for(self, name: str) -> int:
        return stream_seed(self.seed, name)

    def with_seed(self, seed: int) -> ExperimentConfig:
        """Same experiment under another master seed (the corpus follows the master seed)."""
        d = self.to_dict()
        d["seed"] = int(seed)
        d["corpus"].pop("seed")
        return ExperimentConfig.from_dict(d)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigError("config: expected an object")
        data = dict(data)
        corpus = data.get("corpus")
        if isinstance(corpus, dict) and "seed" in corpus:
            if corpus["seed"] != stream_seed(data.get("seed", 0), "corpus"):
                raise ConfigError("corpus.seed is derived from the master seed; set 'seed' instead")
            data["corpus"] = {k: v for k, v in corpus.items() if k != "seed"}
        try:
            cfg = _build(cls, data, "config")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.dae.model.n_classes != cfg.corpus.n_classes or cfg.segmenter.model.n_classes != cfg.corpus.n_classes:
            raise ConfigError("segmenter, DAE and corpus must agree on the number of classes")
        if cfg.dae.model.h_shape != cfg.segmenter.model.h_shape:
            raise ConfigError(
                f"DAE expects h of shape {cfg.dae.model.h_shape} but the segmenter exports {cfg.segmenter.model.h_shape}"
            )
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _build(cls, data: Any, where: str):
    """Recursively construct dataclass ``cls`` from a JSON object, filling defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            merged = _plain(asdict(current))
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{name}: expected an object")
            merged.update(value)
            kwargs[name] = _build(type(current), merged, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
