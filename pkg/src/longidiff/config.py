"""JSON run configuration shared by every CLI command."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .codec import CodecConfig, decode, encode
from .denoiser import DenoiserConfig
from .fundus import DataConfig
from .metrics import ClassifierConfig
from .scheduler import make_schedule

# keys that never change what a training step computes
_UNHASHED = {"data_dir", "run_dir", "steps", "checkpoint_every", "replacement", "eval", "classifier", "data"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    batch: int = 16
    ablation_seeds: int = 32
    ablation_sequences: int = 4
    augment_glaucoma_eyes: int = 2
    augment_count: int = 64
    augment_horizon: int = 2


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data_dir: str = "data"
    run_dir: str = "run"
    factor: int = 4
    frames: int = 6
    years_per_slot: int = 1
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2
    lr: float = 1e-4
    # cosine decay from lr to lr_min over the first lr_decay_steps steps; 0 keeps lr constant
    lr_decay_steps: int = 0
    lr_min: float = 1e-5
    batch_size: int = 4
    steps: int = 3000
    checkpoint_every: int = 500
    hidden_weight: float = 1.0
    # sampling uses an exponential moving average of the weights when > 0
    ema_decay: float = 0.0
    # diffused latents are (codec output - latent_shift) * latent_scale
    latent_shift: float = 0.0
    latent_scale: float = 1.0
    normalize_missing: bool = False
    label_conditioning: bool = True
    replacement: bool = True
    temporal_mode: str = "masked-kv"
    model: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed is mandatory and must be an integer")
        for name in ("frames", "years_per_slot", "T", "batch_size", "checkpoint_every", "factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0 or self.lr_min < 0:
            raise ConfigError("lr must be positive and lr_min non-negative")
        if self.lr_decay_steps < 0:
            raise ConfigError("lr_decay_steps must be >= 0")
        if self.latent_scale <= 0:
            raise ConfigError("latent_scale must be positive")
        if self.hidden_weight < 0:
            raise ConfigError("hidden_weight must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)")
        try:
            make_schedule(self.T, self.beta_start, self.beta_end)
            self.codec
            self.denoiser
            self.data.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def codec(self) -> CodecConfig:
        d = self.data
        return CodecConfig(self.factor, d.channels, d.image_size, d.image_size)

    @property
    def denoiser(self) -> DenoiserConfig:
        codec = self.codec
        extra = dict(self.model)
        for key in ("latent_channels", "latent_size", "frames", "temporal_mode", "signal_levels"):
            if key in extra:
                raise ConfigError(f"model.{key} is derived; set it at the top level")
        return DenoiserConfig(
            latent_channels=codec.latent_channels,
            latent_size=codec.latent_shape[1],
            frames=self.frames,
            temporal_mode=self.temporal_mode,
            signal_levels=tuple(self.schedule().alpha_bars) if extra.get("output") == "v" else None,
            **extra,
        )

    def to_latent(self, frames: np.ndarray) -> np.ndarray:
        """Frames (..., C, H, W) to normalised float32 latents."""
        z = encode(np.asarray(frames, dtype=np.float32), self.factor)
        return ((z - np.float32(self.latent_shift)) * np.float32(self.latent_scale)).astype(np.float32)

    def from_latent(self, z: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_latent` (unclipped)."""
        z = np.asarray(z, dtype=np.float32)
        return decode(z / np.float32(self.latent_scale) + np.float32(self.latent_shift), self.factor)

    def lr_at(self, step: int) -> float:
        """Learning rate used for optimizer step ``step`` (1-based)."""
        if self.lr_decay_steps == 0:
            return self.lr
        frac = min(step - 1, self.lr_decay_steps) / self.lr_decay_steps
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))

    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def hash(self, ignore: tuple[str, ...] = ()) -> str:
        """SHA-256 of the training-relevant settings (paths and step budgets excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED and k not in ignore}
        d["data_shape"] = [self.data.image_size, self.data.channels]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        return from_dict({**self.to_dict(), **kw})


def _build(cls, raw: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    kw = dict(raw)
    for key in ("first_year",):
        if key in kw and isinstance(kw[key], list):
            kw[key] = tuple(kw[key])
    return cls(**kw)


def from_dict(raw: dict[str, Any]) -> RunConfig:
    raw = dict(raw)
    if "seed" not in raw:
        raise ConfigError("config needs a 'seed'")
    for key, cls in (("data", DataConfig), ("classifier", ClassifierConfig), ("eval", EvalConfig)):
        if key in raw and isinstance(raw[key], dict):
            raw[key] = _build(cls, raw[key], key)
    try:
        return _build(RunConfig, raw, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(merge(raw, overrides or {}))


def merge(base: dict, overrides: dict) -> dict:
    """Recursive dict update; nested dicts merge key by key."""
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json())


def same_except_label(a: RunConfig, b: RunConfig) -> bool:
    return a.hash(ignore=("label_conditioning",)) == b.hash(ignore=("label_conditioning",))


__all__ = ["RunConfig", "EvalConfig", "ConfigError", "load_config", "save_config", "from_dict", "same_except_label"]
