import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longidiff.tensor import (
    OP_KINDS,
    Adam,
    AdamState,
    ShapeError,
    Tensor,
    backward,
    concat,
    conv2d,
    embedding,
    grad_check,
    group_norm,
    index_select,
    matmul,
    mse,
    no_grad,
    optimizer_step,
    silu,
    softmax,
    time_features,
)


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def conv_loops(x, w, b, stride, padding):
    """Direct convolution, one output element at a time."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for j in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = b[j]
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[i, ci, r * stride + a, s * stride + bb] * w[j, ci, a, bb]
                    out[i, j, r, s] = acc
    return out


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w), padding=1).data, x)


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)


def test_conv_ramp_matches_loop_oracle():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.array([[[[1.0, 0.0, -1.0], [2.0, 0.5, -2.0], [1.0, 0.0, -1.0]]]])
    b = np.array([0.25])
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    np.testing.assert_allclose(got, conv_loops(x, w, b, 1, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_random_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, conv_loops(x, w, b, stride, padding), atol=1e-10)


def test_mean_square_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * x).mean())
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_mse_at_minimum_has_zero_gradient():
    x = Tensor(np.array([0.3, -1.2, 4.0]), requires_grad=True)
    backward(mse(x, x))
    np.testing.assert_array_equal(x.grad, 0.0)


# one small graph per op kind; each returns (loss_fn, params)
def _case(kind, rng):
    if kind == "add":
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        return lambda: ((a + b) * (a + b)).mean(), {"a": a, "b": b}
    if kind == "sub":
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        return lambda: ((a - b) * (a - b)).mean(), {"a": a, "b": b}
    if kind == "mul":
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        return lambda: (a * b * a).mean(), {"a": a, "b": b}
    if kind == "scale":
        a = param(rng, 5)
        return lambda: ((a * 2.5) * a).mean(), {"a": a}
    if kind == "expand":
        a, b = param(rng, 3, 1), param(rng, 3, 4)
        return lambda: (a.expand(3, 4) * b).mean(), {"a": a, "b": b}
    if kind == "matmul":
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        return lambda: (matmul(a, b) * matmul(a, b)).mean(), {"a": a, "b": b}
    if kind == "conv2d":
        x, w, b = param(rng, 2, 3, 5, 5), param(rng, 4, 3, 3, 3), param(rng, 4)
        def fn():
            y = conv2d(x, w, b, stride=2, padding=1)
            return (y * y).mean()
        return fn, {"x": x, "w": w, "b": b}
    if kind == "group_norm":
        x, g, b = param(rng, 2, 4, 3, 3), param(rng, 4), param(rng, 4)
        tgt = Tensor(rng.standard_normal((2, 4, 3, 3)))
        return lambda: mse(group_norm(x, g, b, groups=2), tgt), {"x": x, "g": g, "b": b}
    if kind == "softmax":
        x = param(rng, 3, 5)
        mask = np.ones((3, 5), dtype=bool)
        mask[:, 1] = False
        tgt = Tensor(rng.standard_normal((3, 5)))
        return lambda: mse(softmax(x, axis=-1, mask=mask), tgt), {"x": x}
    if kind == "silu":
        x = param(rng, 4, 3)
        return lambda: (silu(x) * silu(x)).mean(), {"x": x}
    if kind == "mean":
        x = param(rng, 3, 4, 2)
        return lambda: (x.mean(axis=(0, 2)) * x.mean(axis=(0, 2))).mean(), {"x": x}
    if kind == "mse":
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        w = np.array([1.0, 0.0, 2.0]).reshape(3, 1)
        return lambda: mse(a, b, weight=w), {"a": a, "b": b}
    if kind == "concat":
        a, b = param(rng, 2, 3), param(rng, 2, 2)
        return lambda: (concat([a, b], axis=1) * concat([b, a], axis=1)).mean(), {"a": a, "b": b}
    if kind == "reshape":
        a, b = param(rng, 2, 6), param(rng, 3, 4)
        return lambda: (a.reshape(3, 4) * b).mean(), {"a": a, "b": b}
    if kind == "transpose":
        a, b = param(rng, 2, 3, 4), param(rng, 4, 2, 3)
        return lambda: (a.transpose(2, 0, 1) * b).mean(), {"a": a, "b": b}
    if kind == "slice":
        a = param(rng, 4, 5)
        return lambda: (a[1:3, ::2] * a[:2, 1:4]).mean(), {"a": a}
    if kind == "index_select":
        a = param(rng, 4, 3)
        return lambda: (index_select(a, [2, 0, 2], axis=0) * index_select(a, [1, 1, 3], axis=0)).mean(), {"a": a}
    if kind == "embedding":
        table = param(rng, 3, 4)
        ids = np.array([[0, 2], [2, 2]])
        return lambda: (embedding(table, ids) * embedding(table, ids)).mean(), {"t": table}
    raise KeyError(kind)


DIFFERENTIABLE = [k for k in OP_KINDS if k != "time_features"]


@pytest.mark.parametrize("kind", DIFFERENTIABLE)
def test_op_gradients_match_central_differences(kind):
    fn, params = _case(kind, np.random.default_rng(7))
    assert grad_check(fn, params, eps=1e-5) < 1e-4


def test_every_op_kind_has_a_gradient_case():
    for kind in DIFFERENTIABLE:
        _case(kind, np.random.default_rng(0))


def test_three_layer_mlp_gradients():
    rng = np.random.default_rng(3)
    p = {f"w{i}": param(rng, 4, 4) for i in range(3)}
    p.update({f"b{i}": param(rng, 1, 4) for i in range(3)})
    x = Tensor(rng.standard_normal((5, 4)))
    tgt = Tensor(rng.standard_normal((5, 4)))

    def fn():
        h = x
        for i in range(3):
            h = silu(matmul(h, p[f"w{i}"]) + p[f"b{i}"].expand(5, 4))
        return mse(softmax(h), tgt)

    assert grad_check(fn, p, eps=1e-5) < 1e-4


def test_linear_layer_gradient_tight():
    rng = np.random.default_rng(4)
    w, b = param(rng, 3, 2), param(rng, 2)
    x = Tensor(rng.standard_normal((6, 3)))
    fn = lambda: mse(matmul(x, w) + b.reshape(1, 2).expand(6, 2), Tensor(np.zeros((6, 2))))
    assert grad_check(fn, {"w": w, "b": b}, eps=1e-5) < 1e-6


def test_time_features_values():
    out = time_features(np.array([0, 3]), 4).data
    np.testing.assert_allclose(out[0], [1, 1, 0, 0])
    np.testing.assert_allclose(out[1], [np.cos(3), np.cos(3e-2), np.sin(3), np.sin(3e-2)], rtol=1e-6)


def test_no_grad_records_nothing():
    a = param(np.random.default_rng(0), 2)
    with no_grad():
        y = a * a
    assert y.node is None and not y.requires_grad


def test_shared_subexpression_accumulates():
    a = Tensor(np.array([3.0]), requires_grad=True)
    y = a * a
    backward((y + y).mean())
    np.testing.assert_allclose(a.grad, [12.0])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_grad_check_requires_float64():
    a = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: (a * a).mean(), {"a": a})


def test_adam_first_step_moves_by_lr():
    p = {"x": Tensor(np.array([1.0]), requires_grad=True)}
    optimizer_step(p, {"x": np.array([1.0])}, AdamState(lr=0.1))
    np.testing.assert_allclose(p["x"].data, [0.9], atol=1e-7)


def test_adam_zero_gradient_keeps_parameters():
    p = {"x": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState(lr=0.1)
    optimizer_step(p, {"x": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["x"].data, [1.0, -2.0])
    assert state.step == 1


def test_adam_descends_quadratic():
    target = Tensor(np.array([0.5, -0.5]))
    p = {"x": Tensor(np.array([2.0, 1.0]), requires_grad=True)}
    opt = Adam(p, lr=0.01)
    losses = []
    for _ in range(3):
        loss = mse(p["x"], target)
        losses.append(loss.item())
        opt.step(backward(loss, p))
    assert losses[0] > losses[1] > losses[2]
    assert opt.state.m["x"].shape == p["x"].shape


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(values):
    y = softmax(Tensor(np.array(values))).data
    assert abs(y.sum() - 1.0) < 1e-6 and np.all(y >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_reshape_transpose_roundtrip(a, b, c):
    x = np.arange(a * b * c, dtype=np.float64).reshape(a, b, c)
    t = Tensor(x).transpose(2, 0, 1).transpose(1, 2, 0).reshape(a * b * c).reshape(a, b, c)
    np.testing.assert_array_equal(t.data, x)
