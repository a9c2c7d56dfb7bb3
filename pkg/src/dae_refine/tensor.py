"""Dense f64 tensors with reverse-mode automatic differentiation.

Image ops work on batched ``N x C x H x W`` arrays; dense ops on ``N x D``.
Every op records a node on the graph when one of its inputs requires a
gradient, and each node carries the name of the scope it was built in so
that model structure can be audited after the fact (see :class:`Graph`).
"""

from __future__ import annotations

import contextlib
import struct
import threading
import weakref
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

LOG_CLAMP = 1e-12

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


class ShapeError(ValueError):
    pass


def _scope() -> str:
    return getattr(_state, "scope", "")


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Tag every op created inside the block with ``name``."""
    prev = _scope()
    _state.scope = name
    try:
        yield
    finally:
        _state.scope = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded operation: its inputs, its output and a local backward rule."""

    __slots__ = ("op", "inputs", "_output", "backward", "scope")

    def __init__(self, op, inputs, output, backward, scope_name):
        self.op = op
        self.inputs = inputs
        # weak, so a tensor and its node do not form a cycle that delays freeing
        self._output = weakref.ref(output)
        self.backward = backward
        self.scope = scope_name

    @property
    def output(self):
        return self._output()

    def __repr__(self) -> str:
        return f"Node({self.op!r}, scope={self.scope!r})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), out, backward, _scope())
    return out


# ---------------------------------------------------------------------------
# graph and backward pass


class Graph:
    """Topologically ordered nodes reachable from an output tensor."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            node = t.node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for parent in node.inputs:
                if parent.node is not None and id(parent.node) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        found: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.node is None:
                    found[id(t)] = t
        return list(found.values())

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Back-propagate a scalar loss.

    Every leaf that requires a gradient gets its ``.grad`` set.  When ``wrt``
    is given, the returned map holds one gradient per entry; parameters the
    loss does not depend on get a zero array.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        g_ins = node.backward(g_out)
        for t, g in zip(node.inputs, g_ins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    for leaf in graph.leaves():
        if leaf.requires_grad:
            leaf.grad = grads.get(id(leaf), np.zeros_like(leaf.data))
    if loss.node is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
    if wrt is None:
        return {}
    return {name: grads.get(id(p), np.zeros_like(p.data)) for name, p in wrt.items()}


# ---------------------------------------------------------------------------
# elementwise and reductions


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = a.data * c
    return _make("scale", data, (a,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log with the argument clamped from below; no gradient where clamped."""
    x = as_tensor(x)
    live = x.data > clamp
    safe = np.where(live, x.data, clamp)
    return _make("log", np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` of shape (C,) to ``x`` of shape (N, C, ...)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} over channels of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _make("add_bias", x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer ``x @ w + b`` with ``w`` of shape (in, out)."""
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# convolution, pooling, unpooling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int | None = None) -> Tensor:
    """Stride-1 cross-correlation of (N, C_in, H, W) with (C_out, C_in, k, k) kernels.

    ``pad`` defaults to ``k // 2`` which keeps the spatial size.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernels, got {x.shape}, {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_in_w, k, k2 = w.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernels expect {c_in_w}")
    if k != k2:
        raise ShapeError("conv2d: kernels must be square")
    p = k // 2 if pad is None else pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: kernel larger than padded input")
    cols = np.empty((n, c_in, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + ho, j : j + wo]
    cols = cols.reshape(n, c_in * k * k, ho * wo)
    wm = w.data.reshape(c_out, c_in * k * k)
    out = np.matmul(wm, cols).reshape(n, c_out, ho, wo)
    xp_shape = xp.shape

    def _backward(g):
        g3 = g.reshape(n, c_out, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g3).reshape(n, c_in, k, k, ho, wo)
            gxp = np.zeros(xp_shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        return gx, gw

    y = _make("conv2d", out, (x, w), _backward)
    return add_bias(y, b) if b is not None else y


@dataclass(frozen=True)
class Switches:
    """Argmax position (0..3, row-major in the 2x2 window) for each pooled cell."""

    index: np.ndarray
    input_shape: tuple[int, ...]

    @property
    def pooled_shape(self) -> tuple[int, ...]:
        return self.index.shape


def maxpool2_with_switches(x: Tensor) -> tuple[Tensor, Switches]:
    """2x2 non-overlapping max pooling; ties go to the first position in the window."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    sw = Switches(idx, x.shape)
    return _make("maxpool2", out, (x,), lambda g: (_scatter(g, sw),)), sw


def _scatter(values: np.ndarray, sw: Switches) -> np.ndarray:
    n, c, h, w = sw.input_shape
    win = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(win, sw.index[..., None], values[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _gather(full: np.ndarray, sw: Switches) -> np.ndarray:
    n, c, h, w = sw.input_shape
    win = full.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    return np.take_along_axis(win, sw.index[..., None], axis=-1)[..., 0]


def unpool_with_switches(x: Tensor, sw: Switches) -> Tensor:
    """Place each value at the position its matching max-pool recorded; zeros elsewhere."""
    x = as_tensor(x)
    if x.shape != sw.pooled_shape:
        raise ShapeError(f"unpool: input {x.shape} does not match switches {sw.pooled_shape}")
    return _make("unpool2", _scatter(x.data, sw), (x,), lambda g: (_gather(g, sw),))


# ---------------------------------------------------------------------------
# channel ops


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"channel_concat: {t.shape} incompatible with {base}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _make("channel_concat", out, tensors, _backward)


def softmax_over_channels(x: Tensor) -> Tensor:
    """Softmax along axis 1 (channels for images, features for dense input)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make("softmax", s, (x,), _backward)


# ---------------------------------------------------------------------------
# checkpoint format: "CSTN" | u32 version | u32 rank | u64 dims[rank] | f64 payload (little-endian)

MAGIC = b"CSTN"
VERSION = 1


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensors(path: str | Path, arrays: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path: str | Path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while fh.peek(1) if hasattr(fh, "peek") else False:
            out.append(read_tensor(fh))
    return out
