"""DDPM noise schedule, forward noising, reverse step and the masked noise loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, mse


@dataclass(frozen=True)
class Schedule:
    """Tables indexed by step ``t`` in ``1..T``; index 0 holds the identity step."""

    betas: np.ndarray  # (T+1,), betas[0] == 0
    alphas: np.ndarray
    alpha_bars: np.ndarray  # alpha_bars[0] == 1
    posterior_variance: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas) -> "Schedule":
        b = np.asarray(betas, dtype=np.float64).reshape(-1)
        if b.size < 1 or np.any(b < 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty sequence in [0, 1)")
        betas_ = np.concatenate([[0.0], b])
        alphas = 1.0 - betas_
        abar = np.cumprod(alphas)
        post = np.zeros_like(betas_)
        denom = 1.0 - abar[1:]
        num = betas_[1:] * (1.0 - abar[:-1])
        np.divide(num, denom, out=post[1:], where=denom > 0)
        return cls(betas_, alphas, abar, post)

    def sigma(self, t: int) -> float:
        return float(np.sqrt(self.posterior_variance[t]))


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2) -> Schedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return Schedule.from_betas(np.linspace(beta_start, beta_end, T))


def _check_t(sched: Schedule, t) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"step t must be in [1, {sched.T}], got {t}")
    return t


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def q_sample(sched: Schedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Closed-form forward noising ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` is an int or one step per leading sample of ``z0``.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"q_sample: shape mismatch {z0.shape} vs {eps.shape}")
    t = _check_t(sched, t)
    abar = _per_sample(sched.alpha_bars[t], z0.ndim)
    out = np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
    return out.astype(z0.dtype, copy=False)


def q_step(sched: Schedule, z_prev: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Single Markov transition q(z_t | z_{t-1})."""
    t = int(_check_t(sched, t))
    b = sched.betas[t]
    return np.sqrt(1.0 - b) * z_prev + np.sqrt(b) * eps


def reverse_step(sched: Schedule, zt: np.ndarray, eps_hat: np.ndarray, t: int, z: np.ndarray | None = None) -> np.ndarray:
    """DDPM ancestral step from ``t`` to ``t-1``; the noise ``z`` is ignored at t == 1."""
    t = int(_check_t(sched, t))
    b, a, abar = sched.betas[t], sched.alphas[t], sched.alpha_bars[t]
    coef = b / np.sqrt(1.0 - abar) if b > 0 else 0.0
    mean = (zt - coef * eps_hat) / np.sqrt(a)
    if t > 1 and z is not None:
        mean = mean + sched.sigma(t) * z
    return mean.astype(np.asarray(zt).dtype, copy=False)


def training_loss(eps: np.ndarray, eps_hat: Tensor, loss_mask: np.ndarray) -> Tensor:
    """Mean squared noise error over the frames selected by ``loss_mask``.

    ``loss_mask`` has one weight per frame (shape ``eps.shape[:k]``); zero
    weights exclude a frame entirely.
    """
    w = np.asarray(loss_mask, dtype=eps_hat.dtype)
    if not np.any(w > 0):
        raise ValueError("training_loss: loss mask selects no frames")
    if eps.shape != eps_hat.shape:
        raise ValueError(f"training_loss: shape mismatch {eps.shape} vs {eps_hat.shape}")
    w = w.reshape(w.shape + (1,) * (eps.ndim - w.ndim))
    return mse(eps_hat, Tensor(np.asarray(eps, dtype=eps_hat.dtype)), weight=w)
