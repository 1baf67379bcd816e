"""Time-aligned frame masks and assembly of the conditioned denoiser input.

Slot codes are normative: ``PRESENT = 1``, ``MISSING = 255``, ``HIDDEN = 0``.
The denoiser input concatenates, along the channel axis and in this order,
the noised latents, the broadcast mask and the truncated latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PRESENT = 1
MISSING = 255
HIDDEN = 0
_CODES = (HIDDEN, PRESENT, MISSING)


@dataclass(frozen=True)
class TimeAlignedMask:
    codes: np.ndarray  # (F,) uint8
    window_start: int
    years_per_slot: int = 1

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        if codes.ndim != 1 or not np.isin(codes, _CODES).all():
            raise ValueError(f"mask codes must be a 1-D array over {{0, 1, 255}}, got {self.codes!r}")
        if np.count_nonzero(codes == HIDDEN) > 1:
            raise ValueError("at most one slot may be hidden")
        object.__setattr__(self, "codes", codes)

    @property
    def F(self) -> int:
        return len(self.codes)

    def slot_of(self, year: int) -> int:
        slot = (int(year) - self.window_start) // self.years_per_slot
        if not 0 <= slot < self.F:
            end = self.window_start + self.F * self.years_per_slot
            raise ValueError(f"year {year} outside window [{self.window_start}, {end})")
        return slot

    def year_of(self, slot: int) -> int:
        return self.window_start + slot * self.years_per_slot

    @property
    def present(self) -> np.ndarray:
        return self.codes == PRESENT

    @property
    def hidden_slot(self) -> int | None:
        idx = np.flatnonzero(self.codes == HIDDEN)
        return int(idx[0]) if idx.size else None


def align(years: Sequence[int], window_start: int, F: int, years_per_slot: int = 1) -> TimeAlignedMask:
    """Mark the slot of every sampled year Present and all others Missing."""
    codes = np.full(F, MISSING, dtype=np.uint8)
    mask = TimeAlignedMask(codes, window_start, years_per_slot)
    owner: dict[int, int] = {}
    for y in years:
        slot = mask.slot_of(y)
        if slot in owner:
            raise ValueError(f"years {owner[slot]} and {y} map to the same slot {slot}")
        owner[slot] = int(y)
        codes[slot] = PRESENT
    return TimeAlignedMask(codes, window_start, years_per_slot)


def window_start_for(target_year: int, F: int, years_per_slot: int = 1) -> int:
    """First year of the F-slot window whose last slot contains ``target_year``."""
    return int(target_year) - F * years_per_slot + 1


def align_window(years: Sequence[int], target_year: int, F: int, years_per_slot: int = 1):
    """Crop ``years`` to the window ending at ``target_year`` and align them.

    Returns the mask and, for each kept year, ``(index into years, slot)``.
    """
    start = window_start_for(target_year, F, years_per_slot)
    end = start + F * years_per_slot
    kept = [(i, y) for i, y in enumerate(years) if start <= y < end]
    mask = align([y for _, y in kept], start, F, years_per_slot)
    return mask, [(i, mask.slot_of(y)) for i, y in kept]


def hide_random_frame(mask: TimeAlignedMask, rng: np.random.Generator) -> TimeAlignedMask:
    """Hide one uniformly chosen Present slot."""
    present = np.flatnonzero(mask.codes == PRESENT)
    if present.size < 2:
        raise ValueError(f"need at least 2 present slots to hide one, got {present.size}")
    codes = mask.codes.copy()
    codes[present[rng.integers(present.size)]] = HIDDEN
    return TimeAlignedMask(codes, mask.window_start, mask.years_per_slot)


def hide_target_slot(mask: TimeAlignedMask, slot: int) -> TimeAlignedMask:
    """Hide ``slot`` (Present or Missing) so that its frame gets generated."""
    if not 0 <= slot < mask.F:
        raise IndexError(f"slot {slot} out of range for F={mask.F}")
    prev = mask.hidden_slot
    if prev is not None and prev != slot:
        raise ValueError(f"slot {prev} is already hidden")
    codes = mask.codes.copy()
    codes[slot] = HIDDEN
    return TimeAlignedMask(codes, mask.window_start, mask.years_per_slot)


def broadcast(codes: np.ndarray, latent_shape: Sequence[int], dtype=np.float32) -> np.ndarray:
    """Replicate per-slot codes ``(..., F)`` over ``(C', h, w)``."""
    codes = np.asarray(codes)
    latent_shape = tuple(latent_shape)
    if codes.shape != latent_shape[: codes.ndim]:
        raise ValueError(f"mask shape {codes.shape} does not match latent shape {latent_shape}")
    full = codes.reshape(codes.shape + (1,) * (len(latent_shape) - codes.ndim))
    return np.broadcast_to(full, latent_shape).astype(dtype)


def truncate(z0: np.ndarray, mask_map: np.ndarray, normalize_missing: bool = False) -> np.ndarray:
    """Pointwise: 0 where the mask is 0, ``z0`` where it is 1, 255 elsewhere.

    ``normalize_missing`` writes -1 instead of 255 (and expects the mask to
    have been remapped the same way).
    """
    z0 = np.asarray(z0)
    mask_map = np.asarray(mask_map)
    if z0.shape != mask_map.shape:
        raise ValueError(f"truncate: shape mismatch {z0.shape} vs {mask_map.shape}")
    missing_code = -1 if normalize_missing else MISSING
    if not np.isin(mask_map, (HIDDEN, PRESENT, missing_code)).all():
        raise ValueError("truncate: mask holds codes outside {0, 1, missing}")
    out = np.where(mask_map == PRESENT, z0, np.zeros((), dtype=z0.dtype))
    out = np.where(mask_map == missing_code, np.asarray(missing_code, dtype=z0.dtype), out)
    return out.astype(z0.dtype, copy=False)


def normalize_mask(mask_map: np.ndarray) -> np.ndarray:
    """Remap the Missing code 255 to -1."""
    return np.where(mask_map == MISSING, np.asarray(-1, dtype=mask_map.dtype), mask_map)


def assemble_input(zt: np.ndarray, mask_map: np.ndarray, truncated: np.ndarray, channel_axis: int = -3) -> np.ndarray:
    """Concatenate noisy latents, broadcast mask and truncated latents along channels."""
    if not (np.shape(zt) == np.shape(mask_map) == np.shape(truncated)):
        raise ValueError(f"assemble_input: shapes {np.shape(zt)}, {np.shape(mask_map)}, {np.shape(truncated)} differ")
    dtype = np.asarray(zt).dtype
    return np.concatenate([zt, np.asarray(mask_map, dtype=dtype), np.asarray(truncated, dtype=dtype)], axis=channel_axis)


def loss_weights(codes: np.ndarray, hidden_weight: float = 1.0) -> np.ndarray:
    """Per-frame loss weights: 0 for Missing slots, ``hidden_weight`` for the hidden one."""
    codes = np.asarray(codes)
    w = (codes != MISSING).astype(np.float64)
    w[codes == HIDDEN] *= hidden_weight
    return w
