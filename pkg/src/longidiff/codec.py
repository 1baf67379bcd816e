"""Lossless space-to-depth codec standing in for a learned image autoencoder.

Index map (per frame, channel ``c`` of the image, block factor ``k``)::

    latent[c*k*k + di*k + dj, i, j] == image[c, i*k + di, j*k + dj]

so each k-by-k pixel block becomes ``k*k`` consecutive latent channels in
row-major block order. The map is a permutation, hence the round trip is
bit-exact and Euclidean norms are preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CodecConfig:
    factor: int = 4
    channels: int = 1
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("codec factor must be >= 1")
        if self.height % self.factor or self.width % self.factor:
            raise ValueError(f"image size {self.height}x{self.width} not divisible by factor {self.factor}")

    @property
    def latent_channels(self) -> int:
        return self.channels * self.factor**2

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.latent_channels, self.height // self.factor, self.width // self.factor


def encode(frames: np.ndarray, factor: int = 4, present: np.ndarray | None = None) -> np.ndarray:
    """Map ``(..., C, H, W)`` frames to ``(..., C*k*k, H/k, W/k)`` latents.

    ``present`` (one flag per leading frame) zeroes the latents of absent
    frames.
    """
    x = np.asarray(frames)
    if x.ndim < 3:
        raise ValueError(f"encode expects (..., C, H, W), got shape {x.shape}")
    *lead, c, h, w = x.shape
    k = factor
    if h % k or w % k:
        raise ValueError(f"frame size {h}x{w} not divisible by factor {k}")
    z = x.reshape(*lead, c, h // k, k, w // k, k)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    z = z.transpose(perm).reshape(*lead, c * k * k, h // k, w // k)
    if present is not None:
        keep = np.asarray(present, dtype=bool).reshape(tuple(lead) + (1, 1, 1))
        z = np.where(keep, z, np.zeros((), dtype=z.dtype))
    return np.ascontiguousarray(z)


def decode(latent: np.ndarray, factor: int = 4) -> np.ndarray:
    """Exact inverse of :func:`encode`."""
    z = np.asarray(latent)
    if z.ndim < 3:
        raise ValueError(f"decode expects (..., C', h, w), got shape {z.shape}")
    *lead, cl, h, w = z.shape
    k = factor
    if cl % (k * k):
        raise ValueError(f"latent channels {cl} not divisible by factor^2 = {k * k}")
    c = cl // (k * k)
    nl = len(lead)
    x = z.reshape(*lead, c, k, k, h, w)
    perm = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    return np.ascontiguousarray(x.transpose(perm).reshape(*lead, c, h * k, w * k))
