"""DDPM machinery: linear noise schedule, closed-form forward corruption, ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # float64, length T
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ScheduleError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ScheduleError("every beta must lie in (0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        # fixed reverse variance sigma_t^2 = beta_t
        return cls(beta, alpha_bar, np.sqrt(beta))

    def to_config(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1]), "kind": "linear"}


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Per-sample schedule values broadcast against `like` (batch on dim 0)."""
    t = torch.as_tensor(t, dtype=torch.long)
    out = torch.as_tensor(values, dtype=like.dtype)[t]
    if out.ndim == 0:
        return out
    return out.reshape(-1, *([1] * (like.ndim - 1)))


def _check_t(t, schedule: NoiseSchedule):
    t_arr = np.asarray(t)
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() >= schedule.T):
        raise ScheduleError(f"t out of range [0, {schedule.T})")


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    `t` is a scalar or a length-B vector indexing the batch dimension.
    """
    x0 = torch.as_tensor(x0)
    eps = torch.as_tensor(eps, dtype=x0.dtype)
    if x0.shape != eps.shape:
        raise ScheduleError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    _check_t(t, schedule)
    ab = _gather(schedule.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def training_loss(eps_pred, eps_true) -> torch.Tensor:
    eps_pred = torch.as_tensor(eps_pred)
    eps_true = torch.as_tensor(eps_true, dtype=eps_pred.dtype)
    if eps_pred.shape != eps_true.shape:
        raise ScheduleError(f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}")
    return torch.mean((eps_pred - eps_true) ** 2)


def posterior_step(x_t, t: int, eps_pred, schedule: NoiseSchedule, noise=None) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}; no noise is added at t = 0."""
    if not 0 <= int(t) < schedule.T:
        raise ScheduleError(f"t={t} out of range [0, {schedule.T})")
    t = int(t)
    x_t = torch.as_tensor(x_t)
    eps_pred = torch.as_tensor(eps_pred, dtype=x_t.dtype)
    beta = float(schedule.beta[t])
    mean = (x_t - (beta / np.sqrt(1.0 - schedule.alpha_bar[t])) * eps_pred) / np.sqrt(1.0 - beta)
    if t == 0 or noise is None:
        return mean
    return mean + float(schedule.sigma[t]) * torch.as_tensor(noise, dtype=x_t.dtype)


def sample_loop(
    denoiser: Callable,
    condition,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    shape,
    x_T=None,
    temperature: float = 1.0,
    dtype=torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    `denoiser(x_t, t, condition)` returns the predicted noise. All randomness
    comes from `rng`; `temperature=0` gives the deterministic mean path.
    """
    if x_T is None:
        x = torch.as_tensor(rng.standard_normal(shape), dtype=dtype)
    else:
        x = torch.as_tensor(x_T, dtype=dtype).clone()
    for t in range(schedule.T - 1, -1, -1):
        eps = denoiser(x, t, condition)
        noise = None
        if t > 0 and temperature:
            noise = temperature * torch.as_tensor(rng.standard_normal(tuple(x.shape)), dtype=dtype)
        x = posterior_step(x, t, eps, schedule, noise)
    return x


def to_model_range(x):
    """[0, 1] intensities to the [-1, 1] diffusion range."""
    return 2.0 * x - 1.0


def from_model_range(x):
    return (x + 1.0) / 2.0
