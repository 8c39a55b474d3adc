"""Image-Frequency Fusion Network and its Siamese masked-image pretraining."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .dataset import PatchMaskSpec, patch_mask
from .nn import ResBlock, norm
from .spectral import SpectralConfig, build_high_pass_filter, spectral_features

COS_EPS = 1e-8


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class IFFNConfig:
    in_modalities: int = 4
    base_channels: int = 32
    rep_channels: int = 64
    n_res_blocks: int = 3
    downscale_factor: int = 2
    spectral_injection: str = "late_concat"
    # hidden width of the pretraining predictor on the masked branch; 0 disables it
    predictor_hidden: int = 0

    def __post_init__(self):
        if self.downscale_factor != 2:
            raise ValueError("the fusion network downsamples by exactly 2")
        if self.rep_channels < 1 or self.base_channels < 1 or self.in_modalities < 1:
            raise ValueError("channel counts must be positive")
        if self.spectral_injection != "late_concat":
            raise ValueError(f"unsupported spectral_injection {self.spectral_injection!r}")
        if self.predictor_hidden < 0:
            raise ValueError("predictor_hidden must be >= 0")


class ImageBranch(nn.Module):
    def __init__(self, cfg: IFFNConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Conv2d(cfg.in_modalities, c, 3, padding=1)
        self.down = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.blocks = nn.ModuleList(ResBlock(c, c) for _ in range(cfg.n_res_blocks))

    def forward(self, x):
        h = self.down(F.silu(self.stem(x)))
        for block in self.blocks:
            h = block(h)
        return h


class SpectralBranch(nn.Module):
    def __init__(self, cfg: IFFNConfig):
        super().__init__()
        c = max(cfg.base_channels // 2, 1)
        self.down = nn.Conv2d(cfg.in_modalities, c, 3, stride=2, padding=1)
        self.conv = nn.Conv2d(c, c, 3, padding=1)
        self.out_channels = c

    def forward(self, s):
        return F.silu(self.conv(F.silu(self.down(s))))


class FusionHead(nn.Module):
    def __init__(self, cfg: IFFNConfig, spectral_channels: int):
        super().__init__()
        c = cfg.base_channels
        self.block = ResBlock(c + spectral_channels, c)
        self.norm = norm(c)
        self.out = nn.Conv2d(c, cfg.rep_channels, 1)

    def forward(self, img_feat, spec_feat):
        h = self.block(torch.cat([img_feat, spec_feat], dim=1))
        return self.out(F.silu(self.norm(h)))


class Predictor(nn.Module):
    """Residual per-location MLP applied to the masked branch during pretraining.

    Without it, matching a stop-gradient copy of the same encoder is solved by
    mapping every input to one direction. The last layer starts at zero, so the
    head is the identity before the first update.
    """

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(channels, hidden, 1), norm(hidden), nn.SiLU(), nn.Conv2d(hidden, channels, 1))
        with torch.no_grad():
            self.net[-1].weight.zero_()
            self.net[-1].bias.zero_()

    def forward(self, z):
        return z + self.net(z)


class IFFN(nn.Module):
    """Fully convolutional encoder from (masked stack, spectral stack) to a half-resolution map.

    The spectral branch joins only at the final fusion block.
    """

    def __init__(self, cfg: IFFNConfig = IFFNConfig()):
        super().__init__()
        self.config = cfg
        self.image_branch = ImageBranch(cfg)
        self.spectral_branch = SpectralBranch(cfg)
        self.fusion_head = FusionHead(cfg, self.spectral_branch.out_channels)
        self.predictor = Predictor(cfg.rep_channels, cfg.predictor_hidden) if cfg.predictor_hidden else None

    @property
    def groups(self) -> list:
        names = ["image_branch", "spectral_branch", "fusion_head"]
        return names + ["predictor"] if self.predictor is not None else names

    def forward(self, masked_stack, spectral_stack):
        if masked_stack.shape != spectral_stack.shape:
            raise ValueError(f"stack shapes differ: {tuple(masked_stack.shape)} vs {tuple(spectral_stack.shape)}")
        h, w = masked_stack.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"spatial size must be even, got {h}x{w}")
        if masked_stack.shape[-3] != self.config.in_modalities:
            raise ValueError(f"expected {self.config.in_modalities} modalities, got {masked_stack.shape[-3]}")
        return self.fusion_head(self.image_branch(masked_stack), self.spectral_branch(spectral_stack))


def build_iffn(cfg: IFFNConfig, seed: int = 0, dtype=torch.float32) -> IFFN:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = IFFN(cfg)
    return model.to(dtype)


def iffn_forward(masked_stack, spectral_stack, model: IFFN) -> torch.Tensor:
    """Encode a single (M, H, W) stack or a (B, M, H, W) batch."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(masked_stack), dtype=dtype)
    s = torch.as_tensor(np.asarray(spectral_stack), dtype=dtype)
    single = x.ndim == 3
    if single:
        x, s = x[None], s[None]
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise ValueError("non-finite parameters")
    rep = model(x, s)
    return rep[0] if single else rep


def cosine_loss(u, v, eps: float = COS_EPS) -> torch.Tensor:
    """Mean over locations of 1 - cos(u[:, p], v[:, p]); channels are dim -3."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {tuple(u.shape)} vs {tuple(v.shape)}")
    dot = (u * v).sum(dim=-3)
    nu = torch.sqrt((u * u).sum(dim=-3))
    nv = torch.sqrt((v * v).sum(dim=-3))
    cos = dot / torch.clamp(nu * nv, min=eps)
    return torch.mean(1.0 - cos)


def make_optimizer(params, lr: float = 2e-4) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr)


def siamese_pretrain_step(
    batch: np.ndarray,
    mask_spec: PatchMaskSpec,
    model: IFFN,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    spectral_config: SpectralConfig = SpectralConfig(),
    full_spectral: np.ndarray | None = None,
    grad_clip: float = 1.0,
) -> float:
    """One weight-tied Siamese update on a (B, M, H, W) batch of complete stacks.

    The online branch sees patch-masked stacks (followed by the predictor head
    when configured); the target branch sees the complete stacks under a
    stop-gradient. Returns the pre-update loss.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, M, H, W) array")
    filt = build_high_pass_filter(*batch.shape[-2:], spectral_config)
    masked = np.stack([patch_mask(x, mask_spec, rng)[0] for x in batch])
    if full_spectral is None:
        full_spectral = spectral_features(batch, spectral_config, filt)
    masked_spectral = spectral_features(masked, spectral_config, filt)

    dtype = next(model.parameters()).dtype
    model.train()
    rep_online = model(torch.as_tensor(masked, dtype=dtype), torch.as_tensor(masked_spectral, dtype=dtype))
    if model.predictor is not None:
        rep_online = model.predictor(rep_online)
    with torch.no_grad():
        rep_target = model(torch.as_tensor(batch, dtype=dtype), torch.as_tensor(full_spectral, dtype=dtype))
    loss = cosine_loss(rep_online, rep_target)
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite pretraining loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.item())


# ---------------------------------------------------------------------------
# persistence


def save_params(model: IFFN, path, optimizer: torch.optim.Optimizer | None = None, step: int = 0, extra: dict | None = None):
    arrays = {}
    for group in model.groups:
        arrays.update(ckpt.module_arrays(getattr(model, group), group))
    header = {"kind": "iffn", "config": asdict(model.config), "step": int(step),
              "groups": model.groups,
              "dtype": str(next(model.parameters()).dtype).replace("torch.", "")}
    if optimizer is not None:
        opt_arrays, opt_meta = ckpt.optimizer_arrays(optimizer)
        arrays.update(opt_arrays)
        header["optimizer"] = opt_meta
    if extra:
        header["extra"] = extra
    ckpt.write_container(path, arrays, header)


def load_params(path, expected_config: IFFNConfig | None = None):
    """Load an IFFN checkpoint; returns (model, header, arrays)."""
    header, arrays = ckpt.read_container(path)
    if header.get("kind") != "iffn":
        raise ckpt.CheckpointError(f"config mismatch: not an IFFN checkpoint (kind={header.get('kind')!r})")
    cfg = IFFNConfig(**header["config"])
    if expected_config is not None and cfg != expected_config:
        raise ckpt.CheckpointError(f"config mismatch: checkpoint {cfg} vs requested {expected_config}")
    model = IFFN(cfg).to(getattr(torch, header.get("dtype", "float32")))
    if header["groups"] != model.groups:
        raise ckpt.CheckpointError(f"config mismatch: groups {header['groups']} vs {model.groups}")
    for group in model.groups:
        ckpt.load_module_arrays(getattr(model, group), arrays, group)
    return model, header, arrays
