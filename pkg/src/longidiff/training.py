"""Training loop for the masked sequence denoiser.

Every step draws its randomness from ``default_rng([seed, step])``, so a run
resumed from a checkpoint replays the uninterrupted run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig, save_config
from .denoiser import NULL_LABEL, count_params, init_model, predict_noise
from .fundus import Dataset, SequenceRecord, load_dataset
from .masking import (
    MISSING,
    PRESENT,
    TimeAlignedMask,
    align,
    assemble_input,
    broadcast,
    hide_random_frame,
    loss_weights,
    normalize_mask,
    truncate,
    window_start_for,
)
from .scheduler import Schedule, q_sample, training_loss
from .tensor import AdamState, backward, optimizer_step

LOSS_LOG = "loss.csv"
LATEST = "checkpoint.bin"


class TrainingError(RuntimeError):
    pass


@dataclass
class Window:
    """One aligned F-slot training or inference window of a sequence."""

    mask: TimeAlignedMask
    frame_index: np.ndarray  # (F,) index into the sequence's visits, -1 where missing


def window_for(seq: SequenceRecord, target_year: int, frames: int, years_per_slot: int = 1) -> Window:
    """Align the visits of ``seq`` into the window ending at ``target_year``.

    When several visits share a slot only the latest is kept.
    """
    start = window_start_for(target_year, frames, years_per_slot)
    end = start + frames * years_per_slot
    latest: dict[int, int] = {}
    for i, y in enumerate(seq.years):
        if start <= y < end:
            latest[(int(y) - start) // years_per_slot] = i
    chosen = sorted(latest.values())
    mask = align([int(seq.years[i]) for i in chosen], start, frames, years_per_slot)
    index = np.full(frames, -1, dtype=np.int64)
    for i in chosen:
        index[mask.slot_of(int(seq.years[i]))] = i
    return Window(mask, index)


def window_latents(seq_latents: np.ndarray, win: Window) -> np.ndarray:
    """Gather per-slot latents; Missing slots are zero."""
    idx = np.maximum(win.frame_index, 0)
    z = seq_latents[idx]
    return np.where((win.frame_index >= 0).reshape(-1, 1, 1, 1), z, np.zeros((), dtype=z.dtype))


def window_labels(seq: SequenceRecord, win: Window, codes: np.ndarray, conditioned: bool) -> np.ndarray:
    """Per-slot label ids: true labels on Present/Hidden slots, the null token elsewhere."""
    labels = np.full(len(codes), NULL_LABEL, dtype=np.int64)
    if conditioned:
        known = (codes != MISSING) & (win.frame_index >= 0)
        labels[known] = seq.labels[win.frame_index[known]]
    return labels


def conditioning(z0: np.ndarray, codes: np.ndarray, normalize_missing: bool) -> tuple[np.ndarray, np.ndarray]:
    """Broadcast mask and truncated latents for a batch ``z0`` of shape (B, F, C', h, w)."""
    mask_map = broadcast(codes, z0.shape, dtype=z0.dtype)
    if normalize_missing:
        mask_map = normalize_mask(mask_map)
    return mask_map, truncate(z0, mask_map, normalize_missing)


class TrainingSet:
    """Training sequences with their latents precomputed."""

    def __init__(self, dataset: Dataset, cfg: RunConfig):
        self.cfg = cfg
        self.sequences = [s for s in dataset.split("train") if len(s.years) >= 2]
        if not self.sequences:
            raise TrainingError("no training sequence with at least 2 visits")
        self.latents = [cfg.to_latent(s.frames) for s in self.sequences]

    def sample(self, rng: np.random.Generator) -> tuple[int, Window]:
        """Pick a sequence and a window ending at one of its visits (>= 2 Present slots)."""
        cfg = self.cfg
        for _ in range(100):
            k = int(rng.integers(len(self.sequences)))
            seq = self.sequences[k]
            end = int(rng.integers(1, len(seq.years)))
            win = window_for(seq, int(seq.years[end]), cfg.frames, cfg.years_per_slot)
            if np.count_nonzero(win.mask.codes == PRESENT) >= 2:
                return k, win
        raise TrainingError("could not draw a window with 2 present frames; widen frames or years_per_slot")

    def batch(self, rng: np.random.Generator, sched: Schedule) -> dict:
        cfg = self.cfg
        z0, codes, labels = [], [], []
        for _ in range(cfg.batch_size):
            k, win = self.sample(rng)
            mask = hide_random_frame(win.mask, rng)
            z0.append(window_latents(self.latents[k], win))
            codes.append(mask.codes)
            labels.append(window_labels(self.sequences[k], win, mask.codes, cfg.label_conditioning))
        z0 = np.stack(z0)
        codes = np.stack(codes)
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        zt = q_sample(sched, z0, t, eps)
        mask_map, truncated = conditioning(z0, codes, cfg.normalize_missing)
        return {
            "input": assemble_input(zt, mask_map, truncated),
            "eps": eps,
            "t": t,
            "codes": codes,
            "labels": np.stack(labels),
            "weights": loss_weights(codes, cfg.hidden_weight),
        }


def train_step(params, cfg: RunConfig, batch: dict, state: AdamState) -> float:
    eps_hat = predict_noise(params, cfg.denoiser, batch["input"], batch["t"], batch["codes"], batch["labels"])
    loss = training_loss(batch["eps"], eps_hat, batch["weights"])
    value = float(loss.item())
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} at step {state.step + 1} (t={batch['t'].tolist()}, "
            f"codes={batch['codes'].tolist()}); lower lr or check the data"
        )
    optimizer_step(params, backward(loss, params), state)
    return value


EMA_PREFIX = "ema."


def state_tensors(params, state: AdamState, ema: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in params.items()}
    for name in params:
        if name in state.m:
            out["adam.m." + name] = state.m[name]
            out["adam.v." + name] = state.v[name]
    for name, arr in (ema or {}).items():
        out[EMA_PREFIX + name] = arr
    return out


def update_ema(ema: dict[str, np.ndarray], params, decay: float) -> None:
    d = np.float32(decay)
    for name, p in params.items():
        ema[name] = d * ema[name] + (np.float32(1.0) - d) * p.data


def restore(cfg: RunConfig, path: Path) -> tuple[dict, AdamState, dict]:
    """Parameters, optimizer state and weight average stored in a checkpoint."""
    ck = ckpt_io.load(path, expect_hash=cfg.hash())
    ema = {k[len(EMA_PREFIX) :]: v for k, v in ck.tensors.items() if k.startswith(EMA_PREFIX)}
    arrays, m, v = ckpt_io.split_state({k: v for k, v in ck.tensors.items() if not k.startswith(EMA_PREFIX)})
    params = init_model(cfg.denoiser, cfg.seed)
    if set(arrays) != set(params) or (ema and set(ema) != set(params)):
        raise ckpt_io.CheckpointError("checkpoint parameters do not match the model architecture")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ckpt_io.CheckpointError(f"{name}: shape {arrays[name].shape} != {p.shape}")
        p.data = arrays[name].astype(np.float32)
    state = AdamState(lr=cfg.lr, step=ck.step, m=dict(m), v=dict(v))
    return params, state, ema


def load_params(cfg: RunConfig, path: str | Path) -> dict:
    """Weights for generation: the moving average when the run keeps one."""
    params, _, ema = restore(cfg, Path(path))
    if cfg.ema_decay > 0 and ema:
        for name, p in params.items():
            p.data = ema[name].astype(np.float32)
    return params


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    path.write_text("".join(kept))


def train(cfg: RunConfig, resume: bool = True, log: Callable[[str], None] | None = None) -> Path:
    """Train to ``cfg.steps``; returns the path of the latest checkpoint."""
    log = log or (lambda msg: None)
    data = load_dataset(cfg.data_dir)
    if data.image_size != cfg.data.image_size or data.channels != cfg.data.channels:
        raise TrainingError(
            f"dataset is {data.image_size}px x {data.channels}ch but config expects "
            f"{cfg.data.image_size}px x {cfg.data.channels}ch"
        )
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    latest = run / LATEST
    loss_path = run / LOSS_LOG
    if resume and latest.exists():
        params, state, ema = restore(cfg, latest)
        _truncate_log(loss_path, state.step)
        log(f"resumed at step {state.step}")
    else:
        params = init_model(cfg.denoiser, cfg.seed)
        state = AdamState(lr=cfg.lr)
        ema = {}
        loss_path.write_text("step,loss\n")
    save_config(cfg, run / "config.json")
    log(f"{count_params(params)} parameters, config {cfg.hash()[:12]}")
    sched = cfg.schedule()
    bank = TrainingSet(data, cfg)
    if cfg.ema_decay > 0 and not ema:
        ema = {name: p.data.copy() for name, p in params.items()}
    with loss_path.open("a") as fh:
        while state.step < cfg.steps:
            step = state.step + 1
            rng = np.random.default_rng([cfg.seed, step])
            state.lr = cfg.lr_at(step)
            value = train_step(params, cfg, bank.batch(rng, sched), state)
            if cfg.ema_decay > 0:
                update_ema(ema, params, cfg.ema_decay)
            fh.write(f"{step},{value:.9g}\n")
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                fh.flush()
                ck = ckpt_io.Checkpoint(cfg.hash(), step, state_tensors(params, state, ema))
                ckpt_io.save(latest, ck)
                ckpt_io.save(run / f"ckpt-{step:07d}.bin", ck)
                log(f"step {step} loss {value:.4f}")
    if not latest.exists():
        ckpt_io.save(latest, ckpt_io.Checkpoint(cfg.hash(), state.step, state_tensors(params, state, ema)))
    return latest


def read_loss_log(run_dir: str | Path) -> np.ndarray:
    rows = Path(run_dir, LOSS_LOG).read_text().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])


__all__ = [
    "TrainingError",
    "TrainingSet",
    "Window",
    "window_for",
    "window_latents",
    "window_labels",
    "conditioning",
    "train",
    "train_step",
    "restore",
    "load_params",
    "read_loss_log",
]
