"""Parameter initialisation and checkpoint helpers shared by the segmenter and the DAE."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor, load_tensors, save_tensors


def conv_params(rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, zero: bool = False):
    if zero:
        w = np.zeros((c_out, c_in, k, k))
    else:
        w = rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), size=(c_out, c_in, k, k))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True)


def dense_params(rng: np.random.Generator, d_in: int, d_out: int, gain: float = 2.0, zero: bool = False):
    w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, np.sqrt(gain / d_in), size=(d_in, d_out))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(d_out), requires_grad=True)


def checksum(params: Mapping[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def save_checkpoint(directory: str | Path, meta: dict, params: Mapping[str, Tensor]) -> None:
    """``meta.json`` plus ``weights.cstn`` holding one tensor record per parameter, in ``meta["param_order"]``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    order = sorted(params)
    meta = dict(meta, param_order=order, param_shapes=[list(params[k].shape) for k in order])
    save_tensors(directory / "weights.cstn", [params[k].data for k in order])
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory: str | Path) -> tuple[dict, dict[str, Tensor]]:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    arrays = load_tensors(directory / "weights.cstn")
    if len(arrays) != len(meta["param_order"]):
        raise ValueError(f"{directory}: checkpoint holds {len(arrays)} tensors, metadata lists {len(meta['param_order'])}")
    params = {k: Tensor(a, requires_grad=True) for k, a in zip(meta["param_order"], arrays)}
    return meta, params
