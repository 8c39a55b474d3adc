"""Fusion encoder plus conditional denoiser that reconstructs every channel from any available subset."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .dataset import sample_presence_mask, validate_mask
from .diffusion import (NoiseSchedule, from_model_range, make_schedule, q_sample, sample_loop,
                        to_model_range, training_loss)
from .iffn import IFFN, IFFNConfig, TrainingDivergence
from .nn import ResBlock, norm, timestep_embedding
from .spectral import SpectralConfig, spectral_features

CONDITIONING = ("iffn", "unet")
PARAMETERIZATIONS = ("eps", "v")


@dataclass(frozen=True)
class ModelConfig:
    n_modalities: int = 4
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 2)
    conditioning: str = "iffn"  # "unet" feeds the masked stack straight into the denoiser
    out_init_scale: float = 0.1
    # "v": eps_hat = sqrt(1 - ab_t) * x_t + sqrt(ab_t) * net, so the network carries the
    # signal estimate at low SNR instead of a 1/sqrt(ab_t)-amplified residual
    parameterization: str = "eps"

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        if len(self.channel_mult) != 3:
            raise ValueError("the denoiser has exactly three scales")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")


class Denoiser(nn.Module):
    """Three-scale U-Net predicting noise for all M channels.

    The fusion representation is concatenated at the half-resolution encoder
    level; an optional image condition is concatenated with x_t at the input.
    """

    def __init__(self, cfg: ModelConfig, rep_channels: int = 0, image_cond_channels: int = 0):
        super().__init__()
        m = cfg.n_modalities
        c0, c1, c2 = (cfg.base_channels * k for k in cfg.channel_mult)
        temb = 4 * c0
        self.temb_in = c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.in_conv = nn.Conv2d(m + image_cond_channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, c0, temb)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1 + rep_channels, c1, temb)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, temb)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock(2 * c1, c1, temb)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(2 * c0, c0, temb)
        self.out_norm = norm(c0)
        self.out = nn.Conv2d(c0, m, 3, padding=1)
        with torch.no_grad():
            self.out.weight.mul_(cfg.out_init_scale)
            self.out.bias.zero_()
        self.rep_channels = rep_channels
        self.image_cond_channels = image_cond_channels

    def forward(self, x_t, t, rep=None, image_cond=None):
        temb = self.time_mlp(timestep_embedding(t, self.temb_in).to(x_t.dtype))
        h = x_t if image_cond is None else torch.cat([x_t, image_cond], dim=1)
        h0 = self.enc0(self.in_conv(h), temb)
        h = self.down0(h0)
        if rep is not None:
            if rep.shape[-2:] != h.shape[-2:]:
                raise ValueError(f"representation size {tuple(rep.shape[-2:])} != half resolution {tuple(h.shape[-2:])}")
            h = torch.cat([h, rep], dim=1)
        h1 = self.enc1(h, temb)
        h = self.mid(self.down1(h1), temb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec1(torch.cat([h, h1], dim=1), temb)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec0(torch.cat([h, h0], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))


class AMMDiff(nn.Module):
    """Encoder-decoder pair: the IFFN encodes the available inputs, the denoiser decodes all M channels."""

    def __init__(self, model_cfg: ModelConfig = ModelConfig(), iffn_cfg: IFFNConfig = IFFNConfig()):
        super().__init__()
        if iffn_cfg.in_modalities != model_cfg.n_modalities:
            raise ValueError("IFFN and denoiser disagree on the modality count")
        self.model_config = model_cfg
        self.iffn_config = iffn_cfg
        if model_cfg.conditioning == "iffn":
            # the predictor head only serves pretraining
            self.iffn = IFFN(replace(iffn_cfg, predictor_hidden=0))
            self.denoiser = Denoiser(model_cfg, rep_channels=iffn_cfg.rep_channels)
        else:
            self.iffn = None
            self.denoiser = Denoiser(model_cfg, image_cond_channels=model_cfg.n_modalities)

    def encode(self, masked, spectral):
        """Conditioning tensor for a presence-masked batch."""
        if self.iffn is None:
            return to_model_range(masked)
        return self.iffn(masked, spectral)

    def predict_eps(self, x_t, t, cond, schedule: NoiseSchedule | None = None):
        """Noise prediction; the "v" parameterization needs the schedule."""
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        if self.iffn is None:
            out = self.denoiser(x_t, t, image_cond=cond)
        else:
            out = self.denoiser(x_t, t, rep=cond)
        if self.model_config.parameterization == "eps":
            return out
        if schedule is None:
            raise ValueError("the v parameterization needs the noise schedule")
        ab = torch.as_tensor(schedule.alpha_bar, dtype=x_t.dtype)[t].reshape(-1, 1, 1, 1)
        return torch.sqrt(1.0 - ab) * x_t + torch.sqrt(ab) * out


def load_pretrained_iffn(model: AMMDiff, iffn: IFFN) -> None:
    """Copy pretrained encoder weights into the model, leaving the predictor head behind."""
    if model.iffn is None:
        raise ValueError("this model has no IFFN (unet conditioning)")
    state = {k: v for k, v in iffn.state_dict().items() if not k.startswith("predictor.")}
    model.iffn.load_state_dict(state)


def build_model(model_cfg: ModelConfig, iffn_cfg: IFFNConfig, seed: int = 0, dtype=torch.float32) -> AMMDiff:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AMMDiff(model_cfg, iffn_cfg)
    return model.to(dtype)


def _dtype(model: nn.Module):
    return next(model.parameters()).dtype


def denoiser_forward(model: AMMDiff, x_t, t, cond, schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Noise prediction for a single (M, H, W) x_t or a batch."""
    dtype = _dtype(model)
    x = torch.as_tensor(x_t, dtype=dtype)
    c = torch.as_tensor(cond, dtype=dtype)
    single = x.ndim == 3
    if single:
        x, c = x[None], c[None]
    out = model.predict_eps(x, t, c, schedule)
    return out[0] if single else out


def condition_inputs(images: np.ndarray, masks: np.ndarray, full_spectral: np.ndarray | None = None,
                     spectral_config: SpectralConfig = SpectralConfig()):
    """Presence-masked stacks and their spectral features for a (B, M, H, W) batch.

    Spectral features act channelwise and blank channels map to zero, so the
    features of a masked stack equal the complete-stack features with missing
    channels zeroed; a precomputed `full_spectral` is reused that way.
    """
    masks = np.asarray(masks, dtype=bool)
    keep = masks[:, :, None, None].astype(images.dtype)
    masked = images * keep
    if full_spectral is None:
        spectral = spectral_features(masked, spectral_config)
    else:
        spectral = (full_spectral * keep).astype(np.float32)
    return masked.astype(np.float32), spectral


def diffusion_loss(model: AMMDiff, images, masks, t, eps, schedule: NoiseSchedule, full_spectral=None,
                   spectral_config: SpectralConfig = SpectralConfig()) -> torch.Tensor:
    """Noise-prediction MSE over all M channels, present and missing alike."""
    dtype = _dtype(model)
    images = np.asarray(images, dtype=np.float32)
    masked, spectral = condition_inputs(images, np.asarray(masks, dtype=bool), full_spectral, spectral_config)
    cond = model.encode(torch.as_tensor(masked, dtype=dtype), torch.as_tensor(spectral, dtype=dtype))
    x0 = to_model_range(torch.as_tensor(images, dtype=dtype))
    eps = torch.as_tensor(eps, dtype=dtype)
    x_t = q_sample(x0, t, eps, schedule)
    return training_loss(model.predict_eps(x_t, torch.as_tensor(t), cond, schedule), eps)


def train_step(model: AMMDiff, optimizer: torch.optim.Optimizer, batch: np.ndarray, schedule: NoiseSchedule,
               rng: np.random.Generator, full_spectral: np.ndarray | None = None,
               spectral_config: SpectralConfig = SpectralConfig(), grad_clip: float = 1.0,
               masks: np.ndarray | None = None) -> dict:
    """One end-to-end update of denoiser and encoder on a (B, M, H, W) batch.

    Draw order from `rng`: presence masks, then steps, then noise.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, M, H, W) array")
    b, m = batch.shape[:2]
    if masks is None:
        masks = np.stack([sample_presence_mask(rng, m) for _ in range(b)])
    t = rng.integers(0, schedule.T, size=b)
    eps = rng.standard_normal(batch.shape)
    model.train()
    loss = diffusion_loss(model, batch, masks, t, eps, schedule, full_spectral, spectral_config)
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite diffusion loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip if grad_clip else float("inf"))
    optimizer.step()
    return {"loss": float(loss.item()), "grad_norm": float(gnorm)}


@torch.no_grad()
def impute(model: AMMDiff, images, masks, schedule: NoiseSchedule, rng: np.random.Generator,
           spectral_config: SpectralConfig = SpectralConfig(), full_spectral=None):
    """Generate all M channels from the present ones.

    Accepts one (M, H, W) stack with an (M,) mask or a batch of each. Returns
    (generated, composite) in [0, 1]; composite keeps the given channels verbatim.
    """
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
        masks = np.asarray(masks, dtype=bool)[None]
    masks = np.stack([validate_mask(mk, images.shape[1]) for mk in np.asarray(masks, dtype=bool)])
    if full_spectral is not None and single:
        full_spectral = np.asarray(full_spectral)[None]
    dtype = _dtype(model)
    model.eval()
    masked, spectral = condition_inputs(images, masks, full_spectral, spectral_config)
    cond = model.encode(torch.as_tensor(masked, dtype=dtype), torch.as_tensor(spectral, dtype=dtype))

    def denoiser(x_t, t, c):
        return model.predict_eps(x_t, t, c, schedule)

    x0 = sample_loop(denoiser, cond, schedule, rng, images.shape, dtype=dtype)
    if not torch.isfinite(x0).all():
        raise TrainingDivergence("sampling produced non-finite values")
    generated = np.clip(from_model_range(x0).double().numpy(), 0.0, 1.0).astype(np.float32)
    composite = np.where(masks[:, :, None, None], images, generated)
    if single:
        return generated[0], composite[0]
    return generated, composite


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: AMMDiff, schedule: NoiseSchedule, step: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, seed_record: dict | None = None,
                    extra: dict | None = None):
    arrays = ckpt.module_arrays(model.denoiser, "denoiser")
    groups = ["denoiser"]
    if model.iffn is not None:
        for group in model.iffn.groups:
            arrays.update(ckpt.module_arrays(getattr(model.iffn, group), f"iffn.{group}"))
            groups.append(f"iffn.{group}")
    header = {
        "kind": "amm",
        "model_config": asdict(model.model_config),
        "iffn_config": asdict(model.iffn_config),
        "schedule": schedule.to_config(),
        "step": int(step),
        "seed_record": seed_record or {},
        "groups": groups,
        "dtype": str(_dtype(model)).replace("torch.", ""),
    }
    if optimizer is not None:
        opt_arrays, opt_meta = ckpt.optimizer_arrays(optimizer)
        arrays.update(opt_arrays)
        header["optimizer"] = opt_meta
    if extra:
        header["extra"] = extra
    ckpt.write_container(path, arrays, header)


def _plain(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def load_checkpoint(path, model_config: ModelConfig | None = None, iffn_config: IFFNConfig | None = None):
    """Load an AMM checkpoint; returns (model, schedule, header, arrays).

    Raises CheckpointError("config mismatch ...") when a requested config
    differs from the one stored in the file.
    """
    header, arrays = ckpt.read_container(path)
    if header.get("kind") != "amm":
        raise ckpt.CheckpointError(f"config mismatch: not an AMM checkpoint (kind={header.get('kind')!r})")
    stored_model = ModelConfig(**header["model_config"])
    stored_iffn = IFFNConfig(**header["iffn_config"])
    if model_config is not None and _plain(asdict(model_config)) != _plain(asdict(stored_model)):
        raise ckpt.CheckpointError(f"config mismatch: checkpoint {stored_model} vs requested {model_config}")
    if iffn_config is not None and stored_model.conditioning == "iffn" and iffn_config != stored_iffn:
        raise ckpt.CheckpointError(f"config mismatch: checkpoint {stored_iffn} vs requested {iffn_config}")
    model = AMMDiff(stored_model, stored_iffn).to(getattr(torch, header.get("dtype", "float32")))
    ckpt.load_module_arrays(model.denoiser, arrays, "denoiser")
    if model.iffn is not None:
        for group in model.iffn.groups:
            ckpt.load_module_arrays(getattr(model.iffn, group), arrays, f"iffn.{group}")
    s = header["schedule"]
    schedule = make_schedule(s["T"], s["beta_start"], s["beta_end"], s["kind"])
    return model, schedule, header, arrays


def restore_optimizer(optimizer: torch.optim.Optimizer, header: dict, arrays: dict):
    if "optimizer" in header:
        ckpt.load_optimizer_arrays(optimizer, arrays, header["optimizer"])
