"""Frame-wise U-Net noise predictor with label cross-attention and temporal attention.

Parameters live in a flat, ordered ``dict[str, Tensor]``; the layer helpers
below take that dict plus a name prefix. Frames of all sequences in a batch
are folded into the leading axis (``N = B * F``) for the 2-D convolutions
and unfolded again for temporal attention, which attends across the frame
axis independently at every spatial site.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .masking import PRESENT
from .tensor import Tensor, concat, conv2d, embedding, group_norm, index_select, matmul, silu, softmax, time_features

NORMAL, GLAUCOMA, NULL_LABEL = 0, 1, 2
TEMPORAL_MODES = ("masked-kv", "remove-reinsert")

Params = dict[str, Tensor]


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 16
    latent_size: int = 8
    frames: int = 6
    base_channels: int = 32
    depth: int = 2
    channel_mult: tuple[int, ...] | None = None
    heads: int = 4
    groups: int = 8
    label_dim: int = 32
    temporal_mode: str = "masked-kv"
    # "mid": temporal attention in the mid block only; "all": also after every up block
    temporal_levels: str = "mid"
    label_levels: str = "mid"
    temporal_position: bool = False
    # True: the time embedding scales and shifts the second norm of each resblock
    time_scale_shift: bool = False
    # "eps": the network output is the noise; "v": it is the velocity
    # sqrt(ab)*eps - sqrt(1-ab)*z0, converted to noise with signal_levels
    output: str = "eps"
    # cumulative signal fraction per step, index 0 = 1.0; required for output="v"
    signal_levels: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.channel_mult is None:
            object.__setattr__(self, "channel_mult", tuple(min(2**i, 2) for i in range(self.depth + 1)))
        else:
            object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        if len(self.channel_mult) != self.depth + 1:
            raise ValueError("channel_mult needs depth + 1 entries")
        if self.latent_size % (2**self.depth):
            raise ValueError(f"latent size {self.latent_size} not divisible by 2^{self.depth}")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ValueError(f"temporal_mode must be one of {TEMPORAL_MODES}")
        if self.temporal_levels not in ("mid", "all") or self.label_levels not in ("mid", "all"):
            raise ValueError("temporal_levels / label_levels must be 'mid' or 'all'")
        for c in self.widths:
            if c % self.heads:
                raise ValueError(f"heads {self.heads} do not divide width {c}")
            if c % self.groups:
                raise ValueError(f"groups {self.groups} do not divide width {c}")
        if self.output not in ("eps", "v"):
            raise ValueError("output must be 'eps' or 'v'")
        if self.output == "v" and not self.signal_levels:
            raise ValueError("output='v' needs signal_levels")
        if self.signal_levels is not None:
            object.__setattr__(self, "signal_levels", tuple(float(a) for a in self.signal_levels))
        if self.base_channels % 2:
            raise ValueError("base_channels must be even (sinusoidal time features)")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mult)

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels


# --------------------------------------------------------------------------
# initialisation


@dataclass
class _Init:
    rng: np.random.Generator
    dtype: type
    params: Params = field(default_factory=dict)

    def add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    def conv(self, name, cin, cout, k=3, zero=False):
        std = 0.0 if zero else np.sqrt(2.0 / (cin * k * k))
        self.add(name + ".w", self.rng.normal(0.0, std, (cout, cin, k, k)))
        self.add(name + ".b", np.zeros(cout))

    def linear(self, name, din, dout):
        bound = 1.0 / np.sqrt(din)
        self.add(name + ".w", self.rng.uniform(-bound, bound, (din, dout)))
        self.add(name + ".b", np.zeros(dout))

    def norm(self, name, c):
        self.add(name + ".g", np.ones(c))
        self.add(name + ".b", np.zeros(c))

    def resblock(self, name, cin, cout, tdim, scale_shift=False):
        self.norm(name + ".norm1", cin)
        self.conv(name + ".conv1", cin, cout)
        self.linear(name + ".temb", tdim, 2 * cout if scale_shift else cout)
        self.norm(name + ".norm2", cout)
        self.conv(name + ".conv2", cout, cout)
        if cin != cout:
            self.conv(name + ".skip", cin, cout, k=1)

    def attention(self, name, c, ckv=None):
        ckv = c if ckv is None else ckv
        self.norm(name + ".norm", c)
        self.linear(name + ".q", c, c)
        self.linear(name + ".k", ckv, c)
        self.linear(name + ".v", ckv, c)
        self.linear(name + ".out", c, c)


def init_model(config: DenoiserConfig, rng: np.random.Generator | int, dtype=np.float32) -> Params:
    """Deterministically initialise all denoiser parameters."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cfg = config
    ini = _Init(rng, dtype)
    w = cfg.widths
    tdim = cfg.time_dim
    ini.linear("time.l1", cfg.base_channels, tdim)
    ini.linear("time.l2", tdim, tdim)
    ini.add("label.table", rng.uniform(-0.5, 0.5, (3, cfg.label_dim)))
    ini.conv("conv_in", 3 * cfg.latent_channels, w[0])
    for i in range(cfg.depth):
        cin = w[0] if i == 0 else w[i]
        ini.resblock(f"down{i}.res", cin, w[i], tdim, cfg.time_scale_shift)
        ini.attention(f"down{i}.attn", w[i])
        ini.conv(f"down{i}.down", w[i], w[i + 1])
    d = cfg.depth
    ini.resblock("mid.res", w[d], w[d], tdim, cfg.time_scale_shift)
    ini.attention("mid.attn", w[d])
    ini.attention("mid.xattn", w[d], cfg.label_dim)
    ini.attention("mid.tattn", w[d])
    if cfg.temporal_position:
        ini.add("mid.tattn.pos", rng.uniform(-0.1, 0.1, (cfg.frames, w[d])))
    for i in reversed(range(cfg.depth)):
        ini.conv(f"up{i}.up", w[i + 1], w[i])
        ini.resblock(f"up{i}.res", 2 * w[i], w[i], tdim, cfg.time_scale_shift)
        ini.attention(f"up{i}.attn", w[i])
        if cfg.label_levels == "all":
            ini.attention(f"up{i}.xattn", w[i], cfg.label_dim)
        if cfg.temporal_levels == "all":
            ini.attention(f"up{i}.tattn", w[i])
            if cfg.temporal_position:
                ini.add(f"up{i}.tattn.pos", rng.uniform(-0.1, 0.1, (cfg.frames, w[i])))
    ini.norm("out.norm", w[0])
    # zero output layer: the untrained model predicts zero noise
    ini.conv("out.conv", w[0], cfg.latent_channels, zero=True)
    return ini.params


def count_params(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


# --------------------------------------------------------------------------
# layers


def _linear(p: Params, name: str, x: Tensor) -> Tensor:
    y = matmul(x, p[name + ".w"])
    return y + p[name + ".b"].expand(y.shape)


def _conv(p: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = p[name + ".w"]
    return conv2d(x, w, p[name + ".b"], stride=stride, padding=w.shape[-1] // 2)


def _norm(p: Params, name: str, x: Tensor, groups: int) -> Tensor:
    return group_norm(x, p[name + ".g"], p[name + ".b"], groups=groups)


def _resblock(p: Params, name: str, x: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = _conv(p, name + ".conv1", silu(_norm(p, name + ".norm1", x, groups)))
    n, c, hh, ww = h.shape
    emb = _linear(p, name + ".temb", silu(temb))
    if emb.shape[1] == 2 * c:
        scale = emb[:, :c].reshape(n, c, 1, 1).expand(n, c, hh, ww)
        shift = emb[:, c:].reshape(n, c, 1, 1).expand(n, c, hh, ww)
        h = _norm(p, name + ".norm2", h, groups)
        h = h + h * scale + shift
    else:
        h = _norm(p, name + ".norm2", h + emb.reshape(n, c, 1, 1).expand(n, c, hh, ww), groups)
    h = _conv(p, name + ".conv2", silu(h))
    skip = _conv(p, name + ".skip", x) if name + ".skip.w" in p else x
    return skip + h


def multihead_attention(p: Params, name: str, q_in: Tensor, kv_in: Tensor, heads: int, mask=None):
    """Attention of ``q_in`` (M, Lq, C) over ``kv_in`` (M, Lk, Ckv).

    ``mask`` is a boolean array broadcastable to (M, heads, Lq, Lk); False
    keys receive exactly zero weight. Returns the output and the weights.
    """
    m, lq, _ = q_in.shape
    lk = kv_in.shape[1]
    q = _linear(p, name + ".q", q_in)
    k = _linear(p, name + ".k", kv_in)
    v = _linear(p, name + ".v", kv_in)
    c = q.shape[-1]
    dh = c // heads
    q = q.reshape(m, lq, heads, dh).transpose(0, 2, 1, 3)
    k = k.reshape(m, lk, heads, dh).transpose(0, 2, 3, 1)
    v = v.reshape(m, lk, heads, dh).transpose(0, 2, 1, 3)
    weights = softmax(matmul(q, k) * (1.0 / np.sqrt(dh)), axis=-1, mask=mask)
    o = matmul(weights, v).transpose(0, 2, 1, 3).reshape(m, lq, c)
    return _linear(p, name + ".out", o), weights


def _to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def _from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, _, c = t.shape
    return t.transpose(0, 2, 1).reshape(n, c, h, w)


def _spatial_attention(p, name, x, cfg):
    _, _, h, w = x.shape
    tok = _to_tokens(_norm(p, name + ".norm", x, cfg.groups))
    out, _ = multihead_attention(p, name, tok, tok, cfg.heads)
    return x + _from_tokens(out, h, w)


def _label_attention(p, name, x, label_tokens, cfg):
    _, _, h, w = x.shape
    tok = _to_tokens(_norm(p, name + ".norm", x, cfg.groups))
    out, _ = multihead_attention(p, name, tok, label_tokens, cfg.heads)
    return x + _from_tokens(out, h, w)


def temporal_attention(
    p: Params,
    name: str,
    x: Tensor,
    frame_codes: np.ndarray,
    cfg: DenoiserConfig,
    mode: str | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Self-attention across frames at each spatial site, restricted to known frames.

    ``x`` is (B*F, C, H, W); ``frame_codes`` is (B, F). Only Present slots
    are known. ``remove-reinsert`` attends among known slots only and passes
    every other slot through untouched; ``masked-kv`` lets every slot query
    but gives non-known keys zero weight.
    """
    mode = mode or cfg.temporal_mode
    codes = np.asarray(frame_codes)
    b, f = codes.shape
    known = codes == PRESENT
    if not known.any(axis=1).all():
        raise ValueError("temporal attention needs at least one known frame per sequence")
    n, c, h, w = x.shape
    if n != b * f:
        raise ValueError(f"temporal attention: {n} frames but mask is {codes.shape}")
    sites = h * w
    hn = _norm(p, name + ".norm", x, cfg.groups).reshape(b, f, c, sites).transpose(0, 3, 1, 2)
    if name + ".pos" in p:
        hn = hn + p[name + ".pos"].expand(b, sites, f, c)

    if mode == "masked-kv":
        seq = hn.reshape(b * sites, f, c)
        kmask = np.repeat(known, sites, axis=0).reshape(b * sites, 1, 1, f)
        out, weights = multihead_attention(p, name, seq, seq, cfg.heads, mask=kmask)
        if trace is not None:
            trace[name] = weights.data.reshape(b, sites, cfg.heads, f, f)
        out = out.reshape(b, sites, f, c).transpose(0, 2, 3, 1).reshape(n, c, h, w)
        return x + out

    if mode != "remove-reinsert":
        raise ValueError(f"unknown temporal attention mode {mode!r}")
    xt = x.reshape(b, f, c, sites).transpose(0, 3, 1, 2)
    rows = []
    for i in range(b):
        kn = np.flatnonzero(known[i])
        un = np.flatnonzero(~known[i])
        hk = index_select(hn[i], kn, axis=1)
        att, weights = multihead_attention(p, name, hk, hk, cfg.heads)
        if trace is not None:
            trace.setdefault(name, []).append(weights.data)
        parts = [index_select(xt[i], kn, axis=1) + att]
        if un.size:
            parts.append(index_select(xt[i], un, axis=1))
        merged = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        order = np.argsort(np.concatenate([kn, un]), kind="stable")
        rows.append(index_select(merged, order, axis=1).reshape(1, sites, f, c))
    full = concat(rows, axis=0) if b > 1 else rows[0]
    return full.transpose(0, 2, 3, 1).reshape(n, c, h, w)


def _upsample(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h, 1, w, 1).expand(n, c, h, 2, w, 2).reshape(n, c, 2 * h, 2 * w)


def embed_labels(p: Params, labels: np.ndarray) -> Tensor:
    """Per-slot condition tokens (N, 1, d); label 2 is the learned null token."""
    ids = np.asarray(labels, dtype=np.intp).reshape(-1)
    tok = embedding(p["label.table"], ids)
    return tok.reshape(ids.size, 1, tok.shape[-1])


def time_embedding(p: Params, t: np.ndarray, cfg: DenoiserConfig) -> Tensor:
    feats = time_features(np.asarray(t), cfg.base_channels)
    if feats.dtype != p["time.l1.w"].dtype:
        feats = Tensor(feats.data.astype(p["time.l1.w"].dtype))
    return _linear(p, "time.l2", silu(_linear(p, "time.l1", feats)))


def _velocity_to_noise(v: Tensor, zt: np.ndarray, t: np.ndarray, levels) -> Tensor:
    """eps = sqrt(ab) * v + sqrt(1 - ab) * z_t, per folded frame."""
    ab = np.asarray(levels, dtype=np.float64)[t]
    shape = v.shape
    a = np.sqrt(ab).astype(v.dtype).reshape(-1, 1, 1, 1)
    s = (np.sqrt(1.0 - ab).reshape(-1, 1, 1, 1) * zt.reshape(shape)).astype(v.dtype)
    return v * Tensor(np.broadcast_to(a, shape).copy()) + Tensor(s)


def predict_noise(
    p: Params,
    cfg: DenoiserConfig,
    net_input,
    t,
    frame_codes: np.ndarray,
    labels: np.ndarray | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Predict the noise for every frame.

    ``net_input`` is the assembled input of shape (B, F, 3C', h, w) (or
    (F, 3C', h, w) for a single sequence), ``t`` one step per sequence,
    ``frame_codes`` the (B, F) mask codes and ``labels`` the (B, F) label ids
    in {0, 1, 2}. Returns a tensor shaped like the latents.
    """
    x = net_input if isinstance(net_input, Tensor) else Tensor(np.asarray(net_input, dtype=p["conv_in.w"].dtype))
    single = x.ndim == 4
    if single:
        x = x.reshape((1,) + x.shape)
    codes = np.asarray(frame_codes).reshape(x.shape[0], -1)
    b, f, cin, hh, ww = x.shape
    if cin != 3 * cfg.latent_channels or hh != cfg.latent_size or ww != cfg.latent_size:
        raise ValueError(f"predict_noise: input shape {x.shape} does not match config")
    if codes.shape != (b, f):
        raise ValueError(f"predict_noise: mask codes {codes.shape} do not match ({b}, {f})")
    t = np.broadcast_to(np.asarray(t).reshape(-1), (b,))
    if labels is None:
        labels = np.full((b, f), NULL_LABEL)
    labels = np.asarray(labels).reshape(b, f)

    n = b * f
    temb = time_embedding(p, np.repeat(t, f), cfg)
    ltok = embed_labels(p, labels)
    h = _conv(p, "conv_in", x.reshape(n, cin, hh, ww))
    skips = []
    for i in range(cfg.depth):
        h = _resblock(p, f"down{i}.res", h, temb, cfg.groups)
        h = _spatial_attention(p, f"down{i}.attn", h, cfg)
        skips.append(h)
        h = _conv(p, f"down{i}.down", h, stride=2)
    h = _resblock(p, "mid.res", h, temb, cfg.groups)
    h = _spatial_attention(p, "mid.attn", h, cfg)
    h = _label_attention(p, "mid.xattn", h, ltok, cfg)
    h = temporal_attention(p, "mid.tattn", h, codes, cfg, trace=trace)
    for i in reversed(range(cfg.depth)):
        h = _conv(p, f"up{i}.up", _upsample(h))
        h = concat([h, skips[i]], axis=1)
        h = _resblock(p, f"up{i}.res", h, temb, cfg.groups)
        h = _spatial_attention(p, f"up{i}.attn", h, cfg)
        if cfg.label_levels == "all":
            h = _label_attention(p, f"up{i}.xattn", h, ltok, cfg)
        if cfg.temporal_levels == "all":
            h = temporal_attention(p, f"up{i}.tattn", h, codes, cfg, trace=trace)
    h = _conv(p, "out.conv", silu(_norm(p, "out.norm", h, cfg.groups)))
    if cfg.output == "v":
        h = _velocity_to_noise(h, x.data[:, :, : cfg.latent_channels], np.repeat(t, f), cfg.signal_levels)
    out = h.reshape(b, f, cfg.latent_channels, hh, ww)
    return out.reshape(out.shape[1:]) if single else out
