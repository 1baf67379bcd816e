"""Reverse-chain generation of a hidden frame from its known neighbours."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .denoiser import NULL_LABEL, predict_noise
from .masking import HIDDEN, PRESENT, assemble_input
from .scheduler import Schedule, q_sample, reverse_step
from .tensor import no_grad
from .training import conditioning


@dataclass
class GenerationRequest:
    """One sequence window to complete.

    ``z0`` holds the true latents of Present slots (anything elsewhere),
    ``codes`` has exactly one Hidden slot, ``labels`` are per-slot label ids
    and ``seed`` drives every random draw of this request.
    """

    z0: np.ndarray  # (F, C', h, w)
    codes: np.ndarray  # (F,)
    labels: np.ndarray  # (F,)
    seed: tuple[int, ...]


def _check(req: GenerationRequest) -> int:
    hidden = np.flatnonzero(req.codes == HIDDEN)
    if hidden.size != 1:
        raise ValueError(f"generation needs exactly one hidden slot, got codes {req.codes.tolist()}")
    if not np.any(req.codes == PRESENT):
        raise ValueError("generation needs at least one present slot")
    return int(hidden[0])


def generate_latents(
    params,
    cfg: RunConfig,
    requests: list[GenerationRequest],
    sched: Schedule | None = None,
    replacement: bool | None = None,
    eps_model=None,
) -> np.ndarray:
    """Run the reverse chain t = T..1 for a batch of requests.

    Returns the generated latent of each request's hidden slot, (B, C', h, w).
    With replacement, Present slots are reset to a fresh forward sample of
    their true latents before every denoising step. ``eps_model`` replaces
    the network (called as ``eps_model(net_input, t)``) for pipeline checks.
    """
    sched = sched or cfg.schedule()
    replacement = cfg.replacement if replacement is None else replacement
    hidden = [_check(r) for r in requests]
    rngs = [np.random.default_rng(list(r.seed)) for r in requests]
    z0 = np.stack([r.z0 for r in requests]).astype(np.float32)
    codes = np.stack([r.codes for r in requests])
    labels = np.stack([r.labels for r in requests])
    known = (codes == PRESENT)[:, :, None, None, None]
    mask_map, truncated = conditioning(z0, codes, cfg.normalize_missing)
    shape = z0.shape[1:]
    z = np.stack([g.standard_normal(shape) for g in rngs]).astype(np.float32)
    with no_grad():
        for t in range(sched.T, 0, -1):
            if replacement:
                fresh = np.stack([g.standard_normal(shape) for g in rngs]).astype(np.float32)
                z = np.where(known, q_sample(sched, z0, t, fresh), z)
            net_input = assemble_input(z, mask_map, truncated)
            tt = np.full(len(requests), t)
            if eps_model is None:
                eps_hat = predict_noise(params, cfg.denoiser, net_input, tt, codes, labels).data
            else:
                eps_hat = eps_model(net_input, tt)
            noise = np.stack([g.standard_normal(shape) for g in rngs]).astype(np.float32)
            z = reverse_step(sched, z, eps_hat, t, noise)
    return np.stack([z[i, h] for i, h in enumerate(hidden)])


def generate_frames(params, cfg: RunConfig, requests: list[GenerationRequest], batch: int = 16, **kw) -> np.ndarray:
    """Generate and decode hidden frames, clipped to [0, 1]; (B, C, H, W)."""
    out = []
    for i in range(0, len(requests), batch):
        lat = generate_latents(params, cfg, requests[i : i + batch], **kw)
        out.append(cfg.from_latent(lat))
    frames = np.concatenate(out) if out else np.zeros((0,))
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def label_vector(codes: np.ndarray, base: np.ndarray, hidden_label: int | None, conditioned: bool) -> np.ndarray:
    """Per-slot labels with the hidden slot's label set to ``hidden_label``."""
    if not conditioned:
        return np.full(len(codes), NULL_LABEL, dtype=np.int64)
    out = np.asarray(base, dtype=np.int64).copy()
    if hidden_label is not None:
        out[np.asarray(codes) == HIDDEN] = hidden_label
    return out
