"""Seeded training loops for Siamese pretraining and end-to-end AMM training."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .dataset import PatchMaskSpec
from .diffusion import NoiseSchedule
from .iffn import IFFN, make_optimizer, siamese_pretrain_step
from .model import AMMDiff, train_step
from .spectral import SpectralConfig, spectral_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    pretrain_steps: int = 500
    train_steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    pretrain_lr: float = 2e-4
    grad_clip: float = 1.0
    log_every: int = 50
    val_every: int = 0  # 0 disables periodic validation imputation
    val_samples: int = 4
    iffn_lr_scale: float = 1.0  # IFFN learning rate relative to the denoiser's during end-to-end training


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for global step `step`: epoch-wise permutations seeded by (seed, epoch).

    A pure function of its arguments, so a resumed run sees the same batches.
    """
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    if n < batch_size:
        return perm
    return perm[pos * batch_size:(pos + 1) * batch_size]


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    """Independent generator per (seed, step, stream); keeps resumed runs on the same path."""
    return np.random.default_rng([seed, stream, step])


def pretrain_iffn(model: IFFN, images: np.ndarray, steps: int, seed: int, mask_spec: PatchMaskSpec = PatchMaskSpec(),
                  spectral_config: SpectralConfig = SpectralConfig(), batch_size: int = 8, lr: float = 2e-4,
                  grad_clip: float = 1.0, optimizer=None, start_step: int = 0,
                  callback: Callable[[int, float], None] | None = None):
    """Run Siamese pretraining from `start_step`; returns (optimizer, losses)."""
    optimizer = optimizer or make_optimizer(model.parameters(), lr)
    full_spectral = spectral_features(images, spectral_config)
    losses = []
    for step in range(start_step, start_step + steps):
        idx = batch_indices(len(images), batch_size, step, seed)
        loss = siamese_pretrain_step(images[idx], mask_spec, model, optimizer, step_rng(seed, step, 1),
                                     spectral_config, full_spectral[idx], grad_clip)
        losses.append(loss)
        if callback:
            callback(step, loss)
    return optimizer, losses


def make_amm_optimizer(model: AMMDiff, lr: float, iffn_lr_scale: float = 1.0) -> torch.optim.Adam:
    """One Adam over denoiser and encoder; the encoder group may run at a scaled rate."""
    groups = [{"params": list(model.denoiser.parameters()), "lr": lr}]
    if model.iffn is not None:
        groups.append({"params": list(model.iffn.parameters()), "lr": lr * iffn_lr_scale})
    return torch.optim.Adam(groups, lr=lr)


def train_amm(model: AMMDiff, images: np.ndarray, schedule: NoiseSchedule, steps: int, seed: int,
              spectral_config: SpectralConfig = SpectralConfig(), batch_size: int = 8, lr: float = 2e-4,
              grad_clip: float = 1.0, optimizer=None, start_step: int = 0,
              callback: Callable[[int, dict], None] | None = None, iffn_lr_scale: float = 1.0):
    """End-to-end training of encoder and denoiser; returns (optimizer, losses)."""
    optimizer = optimizer or make_amm_optimizer(model, lr, iffn_lr_scale)
    full_spectral = spectral_features(images, spectral_config)
    losses = []
    for step in range(start_step, start_step + steps):
        idx = batch_indices(len(images), batch_size, step, seed)
        metrics = train_step(model, optimizer, images[idx], schedule, step_rng(seed, step, 2),
                             full_spectral[idx], spectral_config, grad_clip)
        losses.append(metrics["loss"])
        if callback:
            callback(step, metrics)
    return optimizer, losses


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return np.array([values.mean()]) if len(values) else values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
