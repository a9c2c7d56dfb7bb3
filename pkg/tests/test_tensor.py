import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dae_refine import tensor as T


def _loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def _loop_conv(x, w, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            out[o, i, j] += w[o, c, di, dj] * xp[c, i + di, j + dj]
    return out


def _scan_pool(x):
    c, h, w = x.shape
    vals = np.zeros((c, h // 2, w // 2))
    pos = np.zeros((c, h // 2, w // 2), dtype=int)
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                best, arg = -np.inf, -1
                for p, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                    v = x[ch, 2 * i + di, 2 * j + dj]
                    if v > best:
                        best, arg = v, p
                vals[ch, i, j], pos[ch, i, j] = best, arg
    return vals, pos


# ---------------------------------------------------------------------------
# forward ops


def test_matmul_identity_and_scalar():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(np.eye(2), m).data, m)
    assert T.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    assert np.max(np.abs(T.matmul(a, b).data - _loop_matmul(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_conv_identity_and_zero_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 3, 3))
    ident = T.conv2d(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(ident.data, x)
    assert not T.conv2d(x, np.zeros((2, 1, 3, 3))).data.any()


def test_conv_matches_six_loop_oracle():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(x[None], w).data[0]
    assert out.shape == (3, 5, 5)
    assert np.max(np.abs(out - _loop_conv(x, w, 1))) < 1e-12


def test_conv_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_pool_simple_and_ties():
    out, sw = T.maxpool2_with_switches(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.data.item() == 4.0 and sw.index.item() == 3
    out, sw = T.maxpool2_with_switches(np.full((1, 1, 2, 2), 7.0))
    assert out.data.item() == 7.0 and sw.index.item() == 0


def test_pool_matches_window_scan():
    x = np.random.default_rng(3).normal(size=(1, 4, 4))
    out, sw = T.maxpool2_with_switches(x[None])
    vals, pos = _scan_pool(x)
    np.testing.assert_array_equal(out.data[0], vals)
    np.testing.assert_array_equal(sw.index[0], pos)


def test_pool_rejects_odd_dims():
    with pytest.raises(T.ShapeError):
        T.maxpool2_with_switches(np.ones((1, 1, 3, 4)))


def test_unpool_places_values():
    rng = np.random.default_rng(4)
    x = np.abs(rng.normal(size=(2, 3, 6, 8))) + 0.01  # post-ReLU domain
    pooled, sw = T.maxpool2_with_switches(x)
    up = T.unpool_with_switches(pooled, sw).data
    windows = up.reshape(2, 3, 3, 2, 4, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 3, 3, 4, 4)
    assert np.all((windows != 0).sum(axis=-1) == 1)
    np.testing.assert_array_equal(windows.sum(axis=-1), pooled.data)
    assert not T.unpool_with_switches(T.Tensor(np.zeros_like(pooled.data)), sw).data.any()
    again, _ = T.maxpool2_with_switches(up)
    np.testing.assert_array_equal(again.data, pooled.data)


def test_unpool_shape_mismatch():
    _, sw = T.maxpool2_with_switches(np.ones((1, 1, 4, 4)))
    with pytest.raises(T.ShapeError):
        T.unpool_with_switches(np.ones((1, 2, 2, 2)), sw)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(0, 2**31 - 1),
)
def test_pool_of_unpool_roundtrip(n, c, hh, ww, seed):
    rng = np.random.default_rng(seed)
    _, sw = T.maxpool2_with_switches(rng.normal(size=(n, c, 2 * hh, 2 * ww)))
    # non-negative (post-ReLU) values: a negative entry would lose to the zeros
    p = rng.uniform(0.1, 2.0, size=(n, c, hh, ww))
    again, sw2 = T.maxpool2_with_switches(T.unpool_with_switches(p, sw))
    np.testing.assert_array_equal(again.data, p)
    np.testing.assert_array_equal(sw2.index, sw.index)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_softmax_on_simplex(n, k, seed):
    x = np.random.default_rng(seed).normal(scale=20, size=(n, k, 3, 2))
    s = T.softmax_over_channels(x).data
    assert np.all(s > 0)
    assert np.max(np.abs(s.sum(axis=1) - 1)) < 1e-12


def test_forward_ops_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 3, 3))
    a = T.softmax_over_channels(T.conv2d(x, w)).data
    b = T.softmax_over_channels(T.conv2d(x, w)).data
    np.testing.assert_array_equal(a, b)


def test_nonfinite_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.Tensor([1.0, np.nan])
    with pytest.raises(T.NonFiniteError):
        T.scale(T.Tensor([1e308]), 10.0)


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_and_dot():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    grads = T.backward(T.sum(x), {"x": x})
    np.testing.assert_array_equal(grads["x"], np.ones((2, 3)))
    y = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    grads = T.backward(T.dot(y, y), {"y": y})
    np.testing.assert_array_equal(grads["y"], 2 * y.data)


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.scale(x, 2.0))


def test_disconnected_parameter_gets_zero_grad():
    x = T.Tensor(np.ones(3), requires_grad=True)
    unused = T.Tensor(np.ones((2, 2)), requires_grad=True)
    grads = T.backward(T.sum(x), {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_fanout_accumulates():
    x = T.Tensor(np.array([1.5, -0.5]), requires_grad=True)
    y = T.add(T.mul(x, x), T.scale(x, 3.0))  # x used three times
    grads = T.backward(T.sum(y), {"x": x})
    np.testing.assert_allclose(grads["x"], 2 * x.data + 3.0)


def test_graph_visits_each_node_once():
    x = T.Tensor(np.ones(2), requires_grad=True)
    a = T.scale(x, 2.0)
    b = T.add(a, a)
    c = T.add(b, a)
    graph = T.Graph.trace(T.sum(c))
    assert len(graph) == 4
    assert len({id(n) for n in graph}) == 4


def _fd_check(build, arrays, n_coords=50, step=1e-5, seed=0):
    """Compare backward() with central differences at sampled coordinates."""
    params = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    grads = T.backward(build(params), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            with T.no_grad():
                up = build(params).item()
            flat[i] = orig - step
            with T.no_grad():
                down = build(params).item()
            flat[i] = orig
            num = (up - down) / (2 * step)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(1e-6, abs(num) + abs(ana)))
    return worst


rng0 = np.random.default_rng(11)
W_PROJ = rng0.normal(size=(2, 3, 4, 4))
UNPOOL_PROJ = rng0.normal(size=(1, 2, 4, 4))

LAYER_CASES = {
    "matmul": (lambda p: T.sum(T.mul(T.matmul(p["a"], p["b"]), T.Tensor(np.arange(6.0).reshape(3, 2)))),
               {"a": rng0.normal(size=(3, 4)), "b": rng0.normal(size=(4, 2))}),
    "dense": (lambda p: T.sum(T.mul(T.dense(p["x"], p["w"], p["b"]), T.dense(p["x"], p["w"], p["b"]))),
              {"x": rng0.normal(size=(3, 4)), "w": rng0.normal(size=(4, 2)), "b": rng0.normal(size=2)}),
    "conv2d": (lambda p: T.sum(T.mul(T.conv2d(p["x"], p["w"], p["b"]), T.Tensor(W_PROJ))),
               {"x": rng0.normal(size=(2, 2, 4, 4)), "w": rng0.normal(size=(3, 2, 3, 3)), "b": rng0.normal(size=3)}),
    "relu": (lambda p: T.sum(T.mul(T.relu(p["x"]), p["x"])),
             {"x": rng0.normal(size=(3, 5)) + 0.05}),
    "add_sub_mul": (lambda p: T.sum(T.mul(T.sub(p["x"], p["y"]), T.add(p["x"], p["y"]))),
                    {"x": rng0.normal(size=(2, 3)), "y": rng0.normal(size=(2, 3))}),
    "maxpool": (lambda p: T.sum(T.mul(T.maxpool2_with_switches(p["x"])[0], T.Tensor(W_PROJ[:1, :2, :2, :2]))),
                {"x": rng0.normal(size=(1, 2, 4, 4))}),
    "unpool": (lambda p: T.sum(T.mul(T.unpool_with_switches(p["x"], T.maxpool2_with_switches(np.asarray(W_PROJ[:1, :2]))[1]),
                                     T.Tensor(UNPOOL_PROJ))),
               {"x": rng0.normal(size=(1, 2, 2, 2))}),
    "channel_concat": (lambda p: T.sum(T.mul(T.channel_concat([p["a"], p["b"]]), T.Tensor(W_PROJ[:, :3]))),
                       {"a": rng0.normal(size=(2, 1, 4, 4)), "b": rng0.normal(size=(2, 2, 4, 4))}),
    "softmax": (lambda p: T.sum(T.mul(T.softmax_over_channels(p["x"]), T.Tensor(W_PROJ))),
                {"x": rng0.normal(size=(2, 3, 4, 4))}),
    "log_mean": (lambda p: T.mean(T.log(p["x"])), {"x": rng0.uniform(0.5, 2.0, size=(3, 4))}),
}


@pytest.mark.parametrize("layer", sorted(LAYER_CASES))
def test_finite_difference_per_layer(layer):
    build, arrays = LAYER_CASES[layer]
    assert _fd_check(build, arrays) < 1e-4


# ---------------------------------------------------------------------------
# checkpoint format


def test_checkpoint_layout_and_roundtrip(tmp_path):
    arr = np.arange(6.0).reshape(2, 3)
    buf = io.BytesIO()
    T.write_tensor(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == b"CSTN"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 2 and int.from_bytes(raw[20:28], "little") == 3
    assert len(raw) == 28 + 6 * 8
    np.testing.assert_array_equal(np.frombuffer(raw[28:], "<f8"), arr.ravel())
    path = tmp_path / "t.cstn"
    T.save_tensors(path, [arr, np.array(3.5), np.ones((1, 2, 1))])
    back = T.load_tensors(path)
    assert [b.shape for b in back] == [(2, 3), (), (1, 2, 1)]
    np.testing.assert_array_equal(back[0], arr)
    assert back[1] == 3.5


def test_checkpoint_bad_magic():
    with pytest.raises(ValueError):
        T.read_tensor(io.BytesIO(b"XXXX" + bytes(8)))
