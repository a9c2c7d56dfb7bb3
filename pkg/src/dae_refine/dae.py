"""Conditional denoising autoencoders and score extraction.

Two model variants share :class:`DaeModel`:

* the convolutional variant maps a (possibly off-simplex) class-probability map and
  segmenter features ``h`` to a denoised probability map.  Downsampling is
  conv + max-pool; upsampling reuses the encoder's pooling switches.  The
  features ``h`` are concatenated to the encoder after pooling stage
  ``concat_stage``.  No encoder activation ever reaches the decoder.
* the dense variant is unconditional and meant for low-dimensional points.
  It outputs ``y + g(y)``.

The score estimate is ``(r(y, h) - y) / sigma^2`` with ``sigma`` the training
corruption level.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .datagen import SegSample, hflip, one_hot, stack
from .layers import checksum, conv_params, dense_params, load_checkpoint, save_checkpoint
from .optim import History, TrainSchedule, fit
from .segmenter import SegmenterModel, predict as segmenter_predict


class Scenario(str, enum.Enum):
    """Which clean map gets corrupted to produce training inputs."""

    PREDICTION = "prediction"  # corrupted feedforward prediction, "DAE(y)"
    GROUNDTRUTH = "groundtruth"  # corrupted one-hot ground truth, "DAE(y_true)"


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorruptionConfig:
    sigma: float
    stream: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


_corruption_count = 0


def corruption_calls() -> int:
    """Number of :func:`corrupt` calls so far in this process (audit hook)."""
    return _corruption_count


def corrupt(y: np.ndarray, cfg: CorruptionConfig, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma^2)`` noise; the result is not projected back onto the simplex."""
    global _corruption_count
    _corruption_count += 1
    return y + cfg.sigma * rng.standard_normal(np.shape(y))


# ---------------------------------------------------------------------------
# architectures


@dataclass(frozen=True)
class ConvDaeConfig:
    n_classes: int = 5
    channels: tuple[int, int, int] = (32, 64, 128)
    h_channels: int = 32
    concat_stage: int = 2
    height: int = 32
    width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.channels) != 3:
            raise ValueError("the DAE has exactly three pooling stages")
        if self.concat_stage not in (1, 2, 3):
            raise ValueError("concat_stage must be 1, 2 or 3")

    @property
    def h_shape(self) -> tuple[int, int, int]:
        f = 2**self.concat_stage
        return (self.h_channels, self.height // f, self.width // f)


@dataclass(frozen=True)
class DenseDaeConfig:
    dim: int = 2
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))


@dataclass
class DaeModel:
    config: ConvDaeConfig | DenseDaeConfig
    params: dict[str, T.Tensor]
    scenario: Scenario | None
    sigma_train: float
    trained: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def conditional(self) -> bool:
        return isinstance(self.config, ConvDaeConfig)

    @classmethod
    def init_conv(cls, config: ConvDaeConfig, scenario: Scenario, sigma: float, seed: int) -> DaeModel:
        rng = np.random.default_rng(seed)
        c1, c2, c3 = config.channels
        k = config.n_classes
        # h joins the input of the layer right after pooling stage `concat_stage`
        widths = [k, c1, c2, c3]
        widths[config.concat_stage] += config.h_channels
        enc_in, mid_in = widths[:3], widths[3]
        shapes = {
            "enc1": (enc_in[0], c1, 3),
            "enc2": (enc_in[1], c2, 3),
            "enc3": (enc_in[2], c3, 3),
            "mid": (mid_in, c3, 3),
            "dec3": (c3, c2, 3),
            "dec2": (c2, c1, 3),
            "dec1": (c1, c1, 3),
            "head": (c1, k, 1),
        }
        params = {}
        for name, (ci, co, ks) in shapes.items():
            params[f"{name}.w"], params[f"{name}.b"] = conv_params(rng, ci, co, ks)
        return cls(config, params, Scenario(scenario), float(sigma))

    @classmethod
    def init_dense(cls, config: DenseDaeConfig, sigma: float, seed: int) -> DaeModel:
        rng = np.random.default_rng(seed)
        dims = [config.dim, *config.hidden]
        params = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"fc{i}.w"], params[f"fc{i}.b"] = dense_params(rng, a, b)
        params["out.w"], params["out.b"] = dense_params(rng, dims[-1], config.dim, zero=True)
        return cls(config, params, None, float(sigma))

    def save(self, directory: str | Path) -> None:
        meta = dict(
            self.meta,
            kind="dae",
            variant="conv" if self.conditional else "dense",
            config=asdict(self.config),
            scenario=self.scenario.value if self.scenario else None,
            sigma_train=self.sigma_train,
            trained=self.trained,
        )
        save_checkpoint(directory, meta, self.params)

    @classmethod
    def load(cls, directory: str | Path) -> DaeModel:
        meta, params = load_checkpoint(directory)
        if meta.get("kind") != "dae":
            raise ValueError(f"{directory} does not hold a DAE checkpoint")
        cfg_cls = ConvDaeConfig if meta["variant"] == "conv" else DenseDaeConfig
        scenario = Scenario(meta["scenario"]) if meta["scenario"] else None
        extra = {k: v for k, v in meta.items() if k not in {"kind", "variant", "config", "scenario", "sigma_train", "trained", "param_order", "param_shapes"}}
        return cls(cfg_cls(**meta["config"]), params, scenario, meta["sigma_train"], meta["trained"], extra)


def _conv(x, p, name, act=True, pad=None):
    y = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], pad=pad)
    return T.relu(y) if act else y


def _conv_forward(model: DaeModel, y_tilde: T.Tensor, h: T.Tensor) -> T.Tensor:
    cfg, p = model.config, model.params
    n = y_tilde.shape[0]
    if y_tilde.shape[1:] != (cfg.n_classes, cfg.height, cfg.width):
        raise T.ShapeError(f"DAE input {y_tilde.shape} does not match ({cfg.n_classes}, {cfg.height}, {cfg.width})")
    if h.shape != (n, *cfg.h_shape):
        raise T.ShapeError(f"conditioning features {h.shape} do not match {(n, *cfg.h_shape)}")
    switches = []
    a = y_tilde
    with T.scope("dae.encoder"):
        for stage in (1, 2, 3):
            a = _conv(a, p, f"enc{stage}")
            a, sw = T.maxpool2_with_switches(a)
            switches.append(sw)
            if stage == cfg.concat_stage:
                a = T.channel_concat([a, h])
    with T.scope("dae.bottleneck"):
        a = _conv(a, p, "mid")
    with T.scope("dae.decoder"):
        for stage, sw in zip((3, 2, 1), reversed(switches)):
            a = _conv(T.unpool_with_switches(a, sw), p, f"dec{stage}")
        a = _conv(a, p, "head", act=False, pad=0)
        return T.softmax_over_channels(a)


def _dense_forward(model: DaeModel, y: T.Tensor) -> T.Tensor:
    p = model.params
    n_hidden = len(model.config.hidden)
    a = y
    with T.scope("dae.dense"):
        for i in range(n_hidden):
            a = T.relu(T.dense(a, p[f"fc{i}.w"], p[f"fc{i}.b"]))
        return T.add(y, T.dense(a, p["out.w"], p["out.b"]))


def dae_forward(model: DaeModel, y_tilde, h=None) -> T.Tensor:
    """Reconstruction ``r(y_tilde, h)``; the conv variant returns per-pixel class probabilities."""
    y_tilde = T.as_tensor(y_tilde)
    if model.conditional:
        if h is None:
            raise T.ShapeError("the conditional DAE needs conditioning features h")
        return _conv_forward(model, y_tilde, T.as_tensor(h))
    if y_tilde.ndim != 2 or y_tilde.shape[1] != model.config.dim:
        raise T.ShapeError(f"dense DAE expects (N, {model.config.dim}), got {y_tilde.shape}")
    return _dense_forward(model, y_tilde)


def reconstruct(model: DaeModel, y: np.ndarray, h: np.ndarray | None = None, batch: int = 50) -> np.ndarray:
    """Gradient-free batched :func:`dae_forward` on plain arrays."""
    out = []
    with T.no_grad():
        for i in range(0, y.shape[0], batch):
            hb = None if h is None else h[i : i + batch]
            out.append(dae_forward(model, y[i : i + batch], hb).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    squared_error: float = 1.0
    cross_entropy: float = 1.0


def dae_loss(y_hat: T.Tensor, target_onehot, weights: LossWeights = LossWeights()) -> T.Tensor:
    """Squared error summed over classes plus categorical cross-entropy, each averaged over pixels."""
    target = T.as_tensor(target_onehot)
    if y_hat.shape != target.shape:
        raise T.ShapeError(f"prediction {y_hat.shape} and target {target.shape} differ")
    pixels = y_hat.size // y_hat.shape[1]
    diff = T.sub(y_hat, target)
    sq = T.scale(T.sum(T.mul(diff, diff)), weights.squared_error / pixels)
    ce = T.scale(T.sum(T.mul(T.log(y_hat), target)), -weights.cross_entropy / pixels)
    return T.add(sq, ce)


def squared_error_loss(y_hat: T.Tensor, target) -> T.Tensor:
    """Mean over points of ``||y_hat - y||^2``; the loss for continuous (dense) targets."""
    diff = T.sub(y_hat, T.as_tensor(target))
    return T.scale(T.sum(T.mul(diff, diff)), 1.0 / y_hat.shape[0])


# ---------------------------------------------------------------------------
# training


@dataclass
class SegFeatures:
    """Frozen segmenter outputs for one split, optionally with a flipped copy."""

    y: np.ndarray
    h: np.ndarray
    labels: np.ndarray


def extract_features(segmenter: SegmenterModel, samples: Sequence[SegSample], with_flips: bool = False) -> SegFeatures:
    if with_flips:
        samples = list(samples) + [hflip(s) for s in samples]
    images, labels = stack(samples)
    y, h = segmenter_predict(segmenter, images)
    return SegFeatures(y, h, labels)


def train_dae(
    scenario: Scenario | str,
    segmenter: SegmenterModel,
    train: Sequence[SegSample],
    val: Sequence[SegSample],
    config: ConvDaeConfig,
    corruption: CorruptionConfig,
    schedule: TrainSchedule,
    seed: int,
    weights: LossWeights = LossWeights(),
    augment: bool = True,
    log=None,
) -> tuple[DaeModel, History]:
    """Train a conditional DAE against a frozen segmenter.

    Inputs are ``corrupt(f(x))`` for the prediction scenario and
    ``corrupt(one_hot(y_true))`` for the ground-truth scenario.  Both condition
    on ``h`` from the clean segmenter pass and regress onto ``y_true``.
    """
    scenario = Scenario(scenario)
    frozen = checksum(segmenter.params)
    k = config.n_classes
    tr = extract_features(segmenter, train, with_flips=augment)
    va = extract_features(segmenter, val)
    n = len(train)
    tr_target = one_hot(tr.labels, k)
    va_target = one_hot(va.labels, k)
    tr_clean = tr.y if scenario is Scenario.PREDICTION else tr_target
    va_clean = va.y if scenario is Scenario.PREDICTION else va_target

    model = DaeModel.init_conv(config, scenario, corruption.sigma, seed)
    rng = np.random.default_rng([seed, corruption.stream])
    noise_rng = np.random.default_rng([seed, corruption.stream, 1])
    flip_rng = np.random.default_rng([seed, corruption.stream, 2])
    va_input = corrupt(va_clean, corruption, np.random.default_rng([seed, corruption.stream, 3]))

    def batch_loss(idx, epoch):
        if augment:
            idx = idx + n * (flip_rng.random(len(idx)) < 0.5)
        y_tilde = corrupt(tr_clean[idx], corruption, noise_rng)
        return dae_loss(dae_forward(model, y_tilde, tr.h[idx]), tr_target[idx], weights)

    def val_loss():
        total = 0.0
        with T.no_grad():
            for i in range(0, va_input.shape[0], 50):
                sl = slice(i, i + 50)
                out = dae_forward(model, va_input[sl], va.h[sl])
                total += dae_loss(out, va_target[sl], weights).item() * out.shape[0]
        return total / va_input.shape[0]

    hist = fit(model.params, n, batch_loss, val_loss, schedule, rng, log=log)
    if checksum(segmenter.params) != frozen:
        raise RuntimeError("segmenter parameters changed during DAE training")
    model.trained = True
    model.meta = {"history": hist.to_dict(), "segmenter_checksum": frozen, "loss_weights": asdict(weights)}
    return model, hist


def train_dense_dae(
    samples: np.ndarray,
    val_samples: np.ndarray,
    config: DenseDaeConfig,
    corruption: CorruptionConfig,
    schedule: TrainSchedule,
    seed: int,
    log=None,
) -> tuple[DaeModel, History]:
    """Unconditional DAE on points: minimise ``||r(y + noise) - y||^2``."""
    model = DaeModel.init_dense(config, corruption.sigma, seed)
    rng = np.random.default_rng([seed, corruption.stream])
    noise_rng = np.random.default_rng([seed, corruption.stream, 1])
    va_input = corrupt(val_samples, corruption, np.random.default_rng([seed, corruption.stream, 3]))

    def batch_loss(idx, epoch):
        y_tilde = corrupt(samples[idx], corruption, noise_rng)
        return squared_error_loss(dae_forward(model, y_tilde), samples[idx])

    def val_loss():
        with T.no_grad():
            return squared_error_loss(dae_forward(model, va_input), val_samples).item()

    hist = fit(model.params, samples.shape[0], batch_loss, val_loss, schedule, rng, log=log)
    model.trained = True
    centre = samples.mean(axis=0)
    model.meta = {
        "history": hist.to_dict(),
        "data_diameter": float(2 * np.max(np.linalg.norm(samples - centre, axis=1))),
        "data_centre": centre.tolist(),
    }
    return model, hist


# ---------------------------------------------------------------------------
# score


@dataclass
class ScoreEstimate:
    field: np.ndarray
    sigma: float

    @property
    def delta(self) -> np.ndarray:
        """The reconstruction displacement ``r(y) - y``."""
        return self.field * self.sigma**2


def score(model: DaeModel, y: np.ndarray, h: np.ndarray | None = None) -> ScoreEstimate:
    if not model.trained:
        raise UntrainedModelError("score needs a trained DAE")
    y = np.asarray(y, dtype=np.float64)
    delta = reconstruct(model, y, h) - y
    return ScoreEstimate(delta / model.sigma_train**2, model.sigma_train)


# ---------------------------------------------------------------------------
# structural audit


def skip_edges(model: DaeModel, y: np.ndarray | None = None, h: np.ndarray | None = None) -> list[tuple[str, str]]:
    """Edges from anything other than the decoder/bottleneck chain into a decoder op.

    Runs one forward pass with gradients on, walks the recorded graph and
    returns ``(source_scope, decoder_op)`` pairs for every decoder node input
    that is neither a parameter nor produced inside the decoder or
    bottleneck.  An empty list means the model has no encoder-to-decoder skip.
    """
    if not model.conditional:
        raise ValueError("the structural audit applies to the convolutional DAE")
    cfg = model.config
    if y is None:
        y = np.full((1, cfg.n_classes, cfg.height, cfg.width), 1.0 / cfg.n_classes)
    if h is None:
        h = np.zeros((y.shape[0], *cfg.h_shape))
    out = dae_forward(model, y, h)
    return decoder_foreign_inputs(T.Graph.trace(out), {id(p) for p in model.params.values()})


def decoder_foreign_inputs(
    graph: T.Graph,
    param_ids: set[int],
    decoder: str = "dae.decoder",
    allowed: tuple[str, ...] = ("dae.decoder", "dae.bottleneck"),
) -> list[tuple[str, str]]:
    """``(source_scope, op)`` for every non-parameter input of a ``decoder`` node born outside ``allowed``."""
    bad = []
    for node in graph:
        if node.scope != decoder:
            continue
        for t in node.inputs:
            if id(t) in param_ids:
                continue
            src = t.node.scope if t.node is not None else "<input>"
            if src not in allowed:
                bad.append((src, node.op))
    return bad
