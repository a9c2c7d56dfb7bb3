"""Feedforward encoder-decoder segmenter that also exports mid-level features.

Three conv + max-pool encoder stages feed a mirrored decoder that unpools
with the encoder's switches and concatenates the matching encoder activation
(skip connections are fine here; only the DAE must avoid them).  The pooled
output of stage ``tap_stage`` is returned as the conditioning features ``h``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .datagen import SegSample, hflip, one_hot, stack
from .layers import conv_params, load_checkpoint, save_checkpoint
from .metrics import ConfusionMatrix, mean_iou
from .optim import History, TrainSchedule, fit


@dataclass(frozen=True)
class SegmenterConfig:
    in_channels: int = 3
    n_classes: int = 5
    channels: tuple[int, int, int] = (16, 32, 64)
    tap_stage: int = 2
    height: int = 32
    width: int = 32
    zero_init_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.channels) != 3:
            raise ValueError("the segmenter has exactly three encoder stages")
        if self.tap_stage not in (1, 2, 3):
            raise ValueError("tap_stage must be 1, 2 or 3")

    @property
    def h_shape(self) -> tuple[int, int, int]:
        f = 2**self.tap_stage
        return (self.channels[self.tap_stage - 1], self.height // f, self.width // f)


@dataclass
class SegmenterOutput:
    y: T.Tensor  # (N, K, H, W) class probabilities
    h: T.Tensor  # (N, C_h, H_l, W_l)


@dataclass
class SegmenterModel:
    config: SegmenterConfig
    params: dict[str, T.Tensor]
    history: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: SegmenterConfig, seed: int) -> SegmenterModel:
        rng = np.random.default_rng(seed)
        c1, c2, c3 = config.channels
        shapes = {
            "enc1": (config.in_channels, c1, 3),
            "enc2": (c1, c2, 3),
            "enc3": (c2, c3, 3),
            "mid": (c3, c3, 3),
            "dec3": (2 * c3, c2, 3),
            "dec2": (2 * c2, c1, 3),
            "dec1": (2 * c1, c1, 3),
        }
        params = {}
        for name, (ci, co, k) in shapes.items():
            params[f"{name}.w"], params[f"{name}.b"] = conv_params(rng, ci, co, k)
        params["head.w"], params["head.b"] = conv_params(rng, c1, config.n_classes, 1, zero=config.zero_init_head)
        return cls(config, params)

    def save(self, directory: str | Path) -> None:
        meta = {"kind": "segmenter", "config": asdict(self.config), "h_shape": list(self.config.h_shape)}
        meta["history"] = self.history
        save_checkpoint(directory, meta, self.params)

    @classmethod
    def load(cls, directory: str | Path) -> SegmenterModel:
        meta, params = load_checkpoint(directory)
        if meta.get("kind") != "segmenter":
            raise ValueError(f"{directory} does not hold a segmenter checkpoint")
        return cls(SegmenterConfig(**meta["config"]), params, meta.get("history", {}))


def _conv(x, params, name, act=True):
    y = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"])
    return T.relu(y) if act else y


def forward(model: SegmenterModel, x) -> SegmenterOutput:
    cfg, p = model.config, model.params
    x = T.as_tensor(x)
    expected = (cfg.in_channels, cfg.height, cfg.width)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise T.ShapeError(f"segmenter expects (N, {expected}), got {x.shape}")
    with T.scope("segmenter"):
        e1 = _conv(x, p, "enc1")
        p1, s1 = T.maxpool2_with_switches(e1)
        e2 = _conv(p1, p, "enc2")
        p2, s2 = T.maxpool2_with_switches(e2)
        e3 = _conv(p2, p, "enc3")
        p3, s3 = T.maxpool2_with_switches(e3)
        m = _conv(p3, p, "mid")
        d3 = _conv(T.channel_concat([T.unpool_with_switches(m, s3), e3]), p, "dec3")
        d2 = _conv(T.channel_concat([T.unpool_with_switches(d3, s2), e2]), p, "dec2")
        d1 = _conv(T.channel_concat([T.unpool_with_switches(d2, s1), e1]), p, "dec1")
        logits = T.conv2d(d1, p["head.w"], p["head.b"], pad=0)
        y = T.softmax_over_channels(logits)
    h = (p1, p2, p3)[cfg.tap_stage - 1]
    return SegmenterOutput(y, h)


def predict_argmax(y) -> np.ndarray:
    """Per-pixel argmax over the class axis (axis -3); ties go to the lowest class index."""
    arr = y.data if isinstance(y, T.Tensor) else np.asarray(y)
    return arr.argmax(axis=-3)


def cross_entropy(y: T.Tensor, target_onehot: np.ndarray) -> T.Tensor:
    """Mean over pixels of ``-sum_k t_k log y_k``."""
    n, _, h, w = y.shape
    return T.scale(T.sum(T.mul(T.log(y), T.Tensor(target_onehot))), -1.0 / (n * h * w))


def predict(model: SegmenterModel, images: np.ndarray, batch: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Frozen inference: (y, h) as plain arrays for a stack of images."""
    ys, hs = [], []
    with T.no_grad():
        for i in range(0, images.shape[0], batch):
            out = forward(model, images[i : i + batch])
            ys.append(out.y.data)
            hs.append(out.h.data)
    return np.concatenate(ys), np.concatenate(hs)


def evaluate(model: SegmenterModel, samples: Sequence[SegSample]) -> ConfusionMatrix:
    images, labels = stack(samples)
    y, _ = predict(model, images)
    return ConfusionMatrix(model.config.n_classes).accumulate(labels, predict_argmax(y))


def train_segmenter(
    model: SegmenterModel,
    train: Sequence[SegSample],
    val: Sequence[SegSample],
    schedule: TrainSchedule,
    seed: int,
    augment: bool = True,
    log=None,
) -> History:
    """Per-pixel cross-entropy training with random horizontal flips; early stops on validation loss."""
    k = model.config.n_classes
    images, labels = stack(train)
    flipped = [hflip(s) for s in train]
    f_images, f_labels = stack(flipped)
    targets, f_targets = one_hot(labels, k), one_hot(f_labels, k)
    v_images, v_labels = stack(val)
    v_targets = one_hot(v_labels, k)
    rng = np.random.default_rng(seed)
    flip_rng = np.random.default_rng([seed, 1])

    def batch_loss(idx, epoch):
        flip = flip_rng.random(len(idx)) < 0.5 if augment else np.zeros(len(idx), bool)
        x = np.where(flip[:, None, None, None], f_images[idx], images[idx])
        t = np.where(flip[:, None, None, None], f_targets[idx], targets[idx])
        return cross_entropy(forward(model, x).y, t)

    def val_loss():
        y, _ = predict(model, v_images)
        return -np.mean(np.sum(v_targets * np.log(np.maximum(y, T.LOG_CLAMP)), axis=1))

    hist = fit(model.params, len(train), batch_loss, val_loss, schedule, rng, log=log)
    cm = evaluate(model, val)
    model.history = dict(hist.to_dict(), val_mean_iou=mean_iou(cm))
    return hist
