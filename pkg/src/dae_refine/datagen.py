"""Synthetic 32x32 segmentation scenes with a thin, partly faded "fence" line.

Each scene is a textured background with a few overlapping shapes
(rectangles, disks, triangles) and, with probability ``structure_rate``, a
straight 1-2 px line drawn on top.  Along the line some segments are drawn at
full contrast while others are faded toward whatever lies underneath, so that
after pixel noise the faded parts are locally indistinguishable from their
surroundings although the straight-line structure still pins down the labels.

Every colour that can appear in a noise-free image comes from a finite
palette (:func:`palette`), so at ``noise_level=0`` labels are recoverable by
exact colour lookup.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import load_tensors, save_tensors

CLASS_NAMES = ("background", "rectangle", "disk", "triangle", "fence")
FENCE = 4
N_ANGLES = 24
OFFSET_STEP = 0.5
MAX_OFFSET = 10.0

# two texture colours per class (RGB)
_TEXTURES = np.array(
    [
        [[0.50, 0.50, 0.46], [0.58, 0.56, 0.52]],
        [[0.78, 0.36, 0.30], [0.70, 0.44, 0.34]],
        [[0.34, 0.66, 0.38], [0.40, 0.58, 0.46]],
        [[0.36, 0.40, 0.76], [0.44, 0.36, 0.68]],
    ]
)
_FENCE_COLOR = np.array([0.16, 0.14, 0.10])


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 400
    n_val: int = 100
    n_test: int = 200
    height: int = 32
    width: int = 32
    n_classes: int = 5
    noise_level: float = 0.12
    structure_rate: float = 0.8
    faint_alpha: float = 0.25
    faint_fraction: float = 0.6
    segment_length: int = 5
    max_shapes: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample")
        if not (0 <= self.structure_rate <= 1 and 0 <= self.faint_fraction <= 1):
            raise ValueError("rates must lie in [0, 1]")
        if self.n_classes != len(CLASS_NAMES):
            raise ValueError(f"the scene generator draws exactly {len(CLASS_NAMES)} classes")
        if self.height % 8 or self.width % 8:
            raise ValueError("image sides must be multiples of 8 (three pooling stages)")
        if self.noise_level < 0 or not 0 < self.faint_alpha <= 1:
            raise ValueError("bad noise_level or faint_alpha")


@dataclass
class SegSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    label: np.ndarray  # (H, W) int class indices
    id: int
    fence: dict | None = field(default=None, compare=False)


def palette(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """All noise-free colours and the class each one encodes."""
    colors, classes = [], []
    for k, pair in enumerate(_TEXTURES):
        for c in pair:
            colors.append(c)
            classes.append(k)
    colors.append(_FENCE_COLOR)
    classes.append(FENCE)
    a = spec.faint_alpha
    for pair in _TEXTURES:
        for c in pair:
            colors.append((1 - a) * c + a * _FENCE_COLOR)
            classes.append(FENCE)
    return np.array(colors), np.array(classes)


def _texture(k: int, rows: np.ndarray, cols: np.ndarray, phase: int) -> np.ndarray:
    if k == 0:
        pick = ((rows + phase) // 3) % 2
    elif k == 1:
        pick = ((cols + phase) // 2) % 2
    elif k == 2:
        pick = ((rows // 2) + (cols // 2) + phase) % 2
    else:
        pick = ((rows + cols + phase) // 2) % 2
    return _TEXTURES[k][pick]  # (H, W, 3)


def fence_mask(h: int, w: int, angle_index: int, offset: float, width: int) -> np.ndarray:
    """Pixels whose centre lies within ``width / 2`` of the line ``n . (p - c) = offset``."""
    theta = np.pi * angle_index / N_ANGLES
    rows, cols = np.mgrid[0:h, 0:w]
    d = np.cos(theta) * (cols - (w - 1) / 2) + np.sin(theta) * (rows - (h - 1) / 2) - offset
    return np.abs(d) < width / 2


def _along(h: int, w: int, angle_index: int) -> np.ndarray:
    theta = np.pi * angle_index / N_ANGLES
    rows, cols = np.mgrid[0:h, 0:w]
    return -np.sin(theta) * (cols - (w - 1) / 2) + np.cos(theta) * (rows - (h - 1) / 2)


def _draw_shape(rng: np.random.Generator, h: int, w: int) -> tuple[int, np.ndarray]:
    rows, cols = np.mgrid[0:h, 0:w]
    kind = int(rng.integers(1, 4))
    if kind == 1:
        r0, c0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
        rh, cw = rng.integers(6, h // 2 + 2), rng.integers(6, w // 2 + 2)
        mask = (rows >= r0) & (rows < r0 + rh) & (cols >= c0) & (cols < c0 + cw)
    elif kind == 2:
        cy, cx = rng.uniform(4, h - 4), rng.uniform(4, w - 4)
        rad = rng.uniform(4, h / 4 + 1)
        mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= rad**2
    else:
        cy, cx = rng.uniform(6, h - 6), rng.uniform(6, w - 6)
        size = rng.uniform(7, h / 2.5 + 1)
        rot = rng.uniform(0, 2 * np.pi)
        verts = np.array(
            [[cy + size * np.sin(rot + t), cx + size * np.cos(rot + t)] for t in (0, 2 * np.pi / 3, 4 * np.pi / 3)]
        )
        mask = _inside_triangle(rows, cols, verts)
    return kind, mask


def _inside_triangle(rows, cols, v) -> np.ndarray:
    def edge(a, b):
        return (b[1] - a[1]) * (rows - a[0]) - (b[0] - a[0]) * (cols - a[1])

    e0, e1, e2 = edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _scene(spec: CorpusSpec, rng: np.random.Generator, sample_id: int) -> SegSample:
    h, w = spec.height, spec.width
    rows, cols = np.mgrid[0:h, 0:w]
    label = np.zeros((h, w), dtype=np.int64)
    img = _texture(0, rows, cols, int(rng.integers(0, 6))).copy()
    for _ in range(int(rng.integers(1, spec.max_shapes + 1))):
        kind, mask = _draw_shape(rng, h, w)
        tex = _texture(kind, rows, cols, int(rng.integers(0, 4)))
        img[mask] = tex[mask]
        label[mask] = kind
    fence = None
    if rng.random() < spec.structure_rate:
        angle = int(rng.integers(0, N_ANGLES))
        n_off = int(MAX_OFFSET / OFFSET_STEP)
        offset = OFFSET_STEP * int(rng.integers(-n_off, n_off + 1))
        width = int(rng.integers(1, 3))
        mask = fence_mask(h, w, angle, offset, width)
        if mask.any():
            seg = np.floor(_along(h, w, angle) / spec.segment_length).astype(np.int64)
            seg_ids = np.unique(seg[mask])
            faint_ids = seg_ids[rng.random(seg_ids.size) < spec.faint_fraction]
            faint = mask & np.isin(seg, faint_ids)
            solid = mask & ~faint
            a = spec.faint_alpha
            img[faint] = (1 - a) * img[faint] + a * _FENCE_COLOR
            img[solid] = _FENCE_COLOR
            label[mask] = FENCE
            fence = {"angle_index": angle, "offset": offset, "width": width}
    image = img.transpose(2, 0, 1)
    if spec.noise_level > 0:
        image = np.clip(image + spec.noise_level * rng.standard_normal(image.shape), 0.0, 1.0)
    return SegSample(np.ascontiguousarray(image), label, sample_id, fence)


def generate(spec: CorpusSpec) -> tuple[list[SegSample], list[SegSample], list[SegSample]]:
    """Build (train, val, test); a pure function of ``spec``."""
    root = np.random.SeedSequence([spec.seed, 0xC0DE])
    splits = []
    next_id = 0
    for stream, n in zip(root.spawn(3), (spec.n_train, spec.n_val, spec.n_test)):
        rng = np.random.default_rng(stream)
        split = []
        for _ in range(n):
            split.append(_scene(spec, rng, next_id))
            next_id += 1
        splits.append(split)
    return tuple(splits)


def hflip(sample: SegSample) -> SegSample:
    return SegSample(
        np.ascontiguousarray(sample.image[:, :, ::-1]),
        np.ascontiguousarray(sample.label[:, ::-1]),
        sample.id,
        None,
    )


def one_hot(label: np.ndarray, n_classes: int) -> np.ndarray:
    """(..., H, W) integer labels to (..., K, H, W) indicator planes."""
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    eye = np.eye(n_classes)
    out = eye[label]  # (..., H, W, K)
    return np.ascontiguousarray(np.moveaxis(out, -1, -3))


def stack(samples: list[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])


def save_corpus(directory: str | Path, spec: CorpusSpec, splits) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, split in zip(("train", "val", "test"), splits):
        images, labels = stack(split)
        ids = np.array([s.id for s in split], dtype=np.float64)
        save_tensors(directory / f"{name}.cstn", [images, labels.astype(np.float64), ids])
    (directory / "meta.json").write_text(json.dumps({"spec": asdict(spec), "class_names": CLASS_NAMES}, indent=2) + "\n")


def load_corpus(directory: str | Path) -> tuple[CorpusSpec, tuple[list[SegSample], ...]]:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    spec = CorpusSpec(**meta["spec"])
    splits = []
    for name in ("train", "val", "test"):
        images, labels, ids = load_tensors(directory / f"{name}.cstn")
        splits.append(
            [SegSample(images[i], labels[i].astype(np.int64), int(ids[i])) for i in range(images.shape[0])]
        )
    return spec, tuple(splits)
