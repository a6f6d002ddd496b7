"""Noise schedule, forward noising, the epsilon-prediction loss and DDIM updates.

Timestep ``-1`` stands for "fully denoised": its cumulative retention
``alpha_bar`` is defined as exactly 1, which is what the final DDIM step
targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.betas)

    @cached_property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bars[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_linear_schedule(d["T"], d["beta_start"], d["beta_end"])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"schedule.T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(
            f"schedule betas need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    betas.setflags(write=False)
    return NoiseSchedule(betas=betas, beta_start=float(beta_start), beta_end=float(beta_end))


def _coeffs(t, sched: NoiseSchedule, like: torch.Tensor):
    """sqrt(alpha_bar) and sqrt(1 - alpha_bar) for a scalar or per-sample ``t``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if (t < 0).any() or (t >= sched.T).any():
            raise ValueError(f"timesteps outside [0, {sched.T})")
        ab = torch.as_tensor(sched.alpha_bars, dtype=like.dtype)[t.long()]
        ab = ab.reshape(-1, *([1] * (like.ndim - 1)))
        return ab.sqrt(), (1 - ab).sqrt()
    ab = sched.alpha_bar(int(t))
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` may be an int or a per-sample tensor."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    if not isinstance(t, torch.Tensor) and not 0 <= int(t) < sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T})")
    a, s = _coeffs(t, sched, z0)
    return a * z0 + s * eps


def ldm_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise, averaged over every element."""
    if eps_true.shape != eps_pred.shape:
        raise ShapeError(f"eps_true {tuple(eps_true.shape)} and eps_pred {tuple(eps_pred.shape)} differ")
    return ((eps_true - eps_pred) ** 2).mean()


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly spaced descending timesteps from ``T-1`` down to 0."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ConfigError(f"steps ({steps}) exceeds training timesteps ({T})")
    ts = np.round(np.linspace(T - 1, 0, steps)).astype(int)
    return [int(v) for v in ts]


def predict_x0(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.alpha_bar(t)
    return (z_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def ddim_step(
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev = -1`` means the clean latent).

    With ``eta = 0`` the update is deterministic; ``eta > 0`` injects fresh noise
    drawn from ``generator`` with the usual DDIM sigma.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if z_t.shape != eps_pred.shape:
        raise ShapeError(f"z_t {tuple(z_t.shape)} and eps_pred {tuple(eps_pred.shape)} differ")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0 = predict_x0(z_t, eps_pred, t, sched)
    sigma = 0.0
    if eta > 0:
        sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))
    direction = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_pred
    z_prev = math.sqrt(ab_prev) * x0 + direction
    if sigma > 0:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
        z_prev = z_prev + sigma * noise
    return z_prev
