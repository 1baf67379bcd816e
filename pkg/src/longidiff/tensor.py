"""Dense tensors with a reverse-mode tape and an Adam optimizer.

Only the operations the denoiser and the glaucoma classifier need are
provided. Elementwise binary ops require equal shapes; broadcasting happens
only through the explicit ``expand`` op.

Every op is reachable through :func:`apply` by its op-kind string, and most
have a thin function wrapper (``matmul``, ``conv2d``, ...) for readability.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "TapeError",
    "apply",
    "backward",
    "grad_check",
    "no_grad",
    "default_dtype",
    "set_debug",
    "AdamState",
    "Adam",
    "optimizer_step",
    "OP_KINDS",
]


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""


class TapeError(RuntimeError):
    """Raised for misuse of the gradient tape."""


_local = threading.local()
_debug = False
_dtype = np.float32


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    prev = _recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors built from non-float data."""
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


def set_debug(flag: bool) -> None:
    """In debug mode every op checks its inputs for NaN/inf."""
    global _debug
    _debug = bool(flag)


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """A row-major dense array plus the tape node that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(_dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return apply("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply("sub", self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return apply("mul", self, other)
        return apply("scale", self, factor=float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return apply("scale", self, factor=-1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply("matmul", self, other)

    def __getitem__(self, index) -> "Tensor":
        return apply("slice", self, index=index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", self, axes=axes)

    def expand(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("expand", self, shape=shape)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return apply("mean", self, axis=axis, keepdims=keepdims)


# --------------------------------------------------------------------------
# op registry

_OPS: dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        _OPS[name] = fn
        return fn

    return deco


def _mismatch(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")


def apply(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run op ``kind`` on ``inputs`` and record it on the tape if needed."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    for x in inputs:
        if not isinstance(x, Tensor):
            raise TypeError(f"{kind}: expected Tensor inputs, got {type(x).__name__}")
    if _debug:
        for x in inputs:
            if not np.all(np.isfinite(x.data)):
                raise FloatingPointError(f"{kind}: non-finite input of shape {x.shape}")
    out, back = fn(*(x.data for x in inputs), **attrs)
    result = Tensor(out)
    if _recording() and any(x.requires_grad for x in inputs):
        result.requires_grad = True
        result.node = TapeNode(kind, inputs, back)
    return result


@_register("add")
def _add(a, b):
    if a.shape != b.shape:
        raise _mismatch("add", a.shape, b.shape)
    return a + b, lambda g: (g, g)


@_register("sub")
def _sub(a, b):
    if a.shape != b.shape:
        raise _mismatch("sub", a.shape, b.shape)
    return a - b, lambda g: (g, -g)


@_register("mul")
def _mul(a, b):
    if a.shape != b.shape:
        raise _mismatch("mul", a.shape, b.shape)
    return a * b, lambda g: (g * b, g * a)


@_register("scale")
def _scale(a, factor: float):
    f = a.dtype.type(factor)
    return a * f, lambda g: (g * f,)


@_register("expand")
def _expand(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise _mismatch("expand", a.shape, shape) from None
    lead = len(shape) - a.ndim

    def back(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, g.shape)) if s == 1 and t != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return out, back


@_register("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _mismatch("matmul", a.shape, b.shape)
    if b.ndim == 2:
        out = a @ b

        def back(g):
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return out, back
    if a.shape[:-2] != b.shape[:-2]:
        raise _mismatch("matmul", a.shape, b.shape)
    out = a @ b
    return out, lambda g: (g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g)


@_register("conv2d")
def _conv2d(x, w, *bias, stride: int = 1, padding: int = 0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _mismatch("conv2d", x.shape, w.shape)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise _mismatch("conv2d", x.shape, w.shape)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    xt = xp.transpose(1, 0, 2, 3)
    # columns laid out (C, kh, kw, N, Ho, Wo) so both passes are single matmuls
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.reshape(o, -1)
    out = wmat @ cols
    if bias:
        (b,) = bias
        if b.shape != (o,):
            raise _mismatch("conv2d bias", b.shape, (o,))
        out += b[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.shape)
        gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
        gxt = np.zeros((c, n) + xp.shape[2:], dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[:, i, j]
        gx = gxt.transpose(1, 0, 2, 3)
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + wd]
        if bias:
            return gx, gw, gm.sum(axis=1)
        return gx, gw

    return out, back


@_register("group_norm")
def _group_norm(x, gamma, beta, groups: int, eps: float = 1e-5):
    if x.ndim < 2 or x.shape[1] % groups or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _mismatch("group_norm", x.shape, gamma.shape)
    n, c = x.shape[:2]
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def back(g):
        red = (0,) + tuple(range(2, x.ndim))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx_hat = (g * gamma.reshape(bshape)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m = xh.shape[2]
        gx = inv / m * (m * gx_hat - gx_hat.sum(axis=2, keepdims=True) - xh * (gx_hat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return out, back


@_register("softmax")
def _softmax(x, axis: int = -1, mask=None):
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a row has every position masked out")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@_register("silu")
def _silu(x):
    s = expit(x)
    return x * s, lambda g: (g * (s * (1.0 + x * (1.0 - s))),)


@_register("mean")
def _mean(x, axis=None, keepdims: bool = False):
    out = x.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(a % x.ndim for a in (axis if isinstance(axis, tuple) else (axis,)))
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return np.asarray(out, dtype=x.dtype), back


@_register("mse")
def _mse(a, b, weight=None):
    if a.shape != b.shape:
        raise _mismatch("mse", a.shape, b.shape)
    d = a - b
    if weight is None:
        w = None
        total = d.size
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=a.dtype), a.shape)
        total = float(w.sum())
        if total <= 0:
            raise ValueError("mse: weights sum to zero")
    sq = d * d if w is None else w * d * d
    out = np.asarray(sq.sum() / total, dtype=a.dtype)

    def back(g):
        ga = (2.0 / total) * g * (d if w is None else w * d)
        return ga.astype(a.dtype), (-ga).astype(a.dtype)

    return out, back


@_register("concat")
def _concat(*xs, axis: int = 0):
    if not xs:
        raise ShapeError("concat: no operands")
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or x.shape[:ax] + x.shape[ax + 1 :] != xs[0].shape[:ax] + xs[0].shape[ax + 1 :]:
            raise _mismatch("concat", xs[0].shape, x.shape)
    out = np.concatenate(xs, axis=ax)
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=ax))


@_register("reshape")
def _reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.reshape(shape)
    except ValueError:
        raise _mismatch("reshape", x.shape, shape) from None
    return out, lambda g: (g.reshape(x.shape),)


@_register("transpose")
def _transpose(x, axes):
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise _mismatch("transpose", x.shape, axes)
    inv = np.argsort([a % x.ndim for a in axes])
    return x.transpose(axes), lambda g: (g.transpose(inv),)


@_register("slice")
def _slice(x, index):
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (slice, int, np.integer)) and ix is not Ellipsis:
            raise TypeError("slice: only basic indexing is supported, use index_select")
    out = x[index]

    def back(g):
        gx = np.zeros_like(x)
        gx[index] = g
        return (gx,)

    return out, back


@_register("index_select")
def _index_select(x, indices, axis: int = 0):
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    if idx.ndim != 1 or (idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax])):
        raise ShapeError(f"index_select: indices out of range for axis {ax} of size {x.shape[ax]}")
    out = np.take(x, idx, axis=ax)

    def back(g):
        gx = np.zeros_like(x)
        np.add.at(np.moveaxis(gx, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (gx,)

    return out, back


@_register("embedding")
def _embedding(table, ids):
    ids = np.asarray(ids, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    out = table[ids]

    def back(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return out, back


@_register("time_features")
def _time_features(t, dim: int, max_period: float = 10000.0):
    if dim % 2:
        raise ValueError("time_features: dim must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    out = np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(_dtype)
    return out, lambda g: ()


OP_KINDS: tuple[str, ...] = tuple(_OPS)


# --------------------------------------------------------------------------
# thin wrappers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", a, b)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    args = (x, w) if b is None else (x, w, b)
    return apply("conv2d", *args, stride=stride, padding=padding)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    return apply("group_norm", x, gamma, beta, groups=groups, eps=eps)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    return apply("softmax", x, axis=axis, mask=mask)


def silu(x: Tensor) -> Tensor:
    return apply("silu", x)


def mse(a: Tensor, b: Tensor, weight=None) -> Tensor:
    return apply("mse", a, b, weight=weight)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply("concat", *xs, axis=axis)


def index_select(x: Tensor, indices, axis: int = 0) -> Tensor:
    return apply("index_select", x, indices=indices, axis=axis)


def embedding(table: Tensor, ids) -> Tensor:
    return apply("embedding", table, ids=ids)


def time_features(t, dim: int) -> Tensor:
    return apply("time_features", t=t, dim=dim)


# --------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for x in t.node.inputs:
                if x.requires_grad and id(x) not in seen:
                    stack.append((x, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict:
    """Back-propagate from a scalar ``loss``.

    Sets ``.grad`` on every leaf tensor that requires grad. With ``params``
    the result maps each name to its gradient (zeros for parameters that did
    not take part in the loss); without it the result maps leaf tensors to
    gradients.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node is None:
        raise TapeError("backward: empty tape (loss was not produced under gradient recording)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for t in reversed(_topo_order(loss)):
        g = grads.get(id(t))
        if t.node is None:
            leaves[id(t)] = t
            continue
        grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t.node.backward_fn(g)
        for x, gx in zip(t.node.inputs, in_grads):
            if not x.requires_grad or gx is None:
                continue
            prev = grads.get(id(x))
            grads[id(x)] = gx if prev is None else prev + gx
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = None if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if params is None:
        return {t: t.grad for t in leaves.values() if t.grad is not None}
    out = {}
    for name, p in params.items():
        g = grads.get(id(p)) if id(p) in leaves else None
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    The error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_per_param`` subsamples elements of large parameters.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"grad_check: eps must be in (0, 1e-3], got {eps}")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check: parameter {name!r} is {p.dtype}, need float64")
    rng = rng or np.random.default_rng(0)
    analytic = backward(fn(), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(a_flat[i] - num) / max(1.0, abs(num)))
    return worst


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update. Parameter arrays are replaced, not mutated."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise _mismatch(f"adam[{name}]", p.shape, grads[name].shape)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        optimizer_step(self.params, grads, self.state)
