"""Image-quality metrics, the copy-modality baseline and per-configuration reports."""

from __future__ import annotations

import json
import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import DEFAULT_MODALITIES, mask_to_str, validate_mask

REPORT_COLUMNS = ("modality", "config", "n", "mse", "psnr", "ssim")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    if data_range <= 0:
        raise ValueError("data_range must be > 0")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / err))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully covered positions."""
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Mean structural similarity over all fully contained Gaussian windows."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# baseline


def correlation_table(stack: np.ndarray) -> np.ndarray:
    """Pearson correlation between modalities over every pixel of an (N, M, H, W) stack."""
    stack = np.asarray(stack, dtype=np.float64)
    flat = stack.transpose(1, 0, 2, 3).reshape(stack.shape[1], -1)
    table = np.corrcoef(flat)
    table = 0.5 * (table + table.T)
    np.fill_diagonal(table, 1.0)
    return table


def baseline_copy_modality(images, mask, table: np.ndarray) -> np.ndarray:
    """Fill each missing channel with the present channel most correlated with it."""
    images = np.asarray(images)
    mask = validate_mask(mask, images.shape[0])
    present = np.flatnonzero(mask)
    out = images.copy()
    for k in np.flatnonzero(~mask):
        src = present[np.argmax(table[k, present])]
        out[k] = images[src]
    return out


class CopyBaseline:
    """Adapter giving the copy baseline the same batch interface as a trained model."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table)

    def __call__(self, images, masks, rng=None):
        preds = np.stack([baseline_copy_modality(x, m, self.table) for x, m in zip(images, masks)])
        return preds


class IdentityPredictor:
    """Returns the ground truth; used to sanity-check report plumbing."""

    def __call__(self, images, masks, rng=None):
        return np.array(images, copy=True)


def model_predictor(model, schedule, spectral_config=None, batch_size: int = 64):
    """Wrap a trained AMM model as a batch predictor returning generated stacks."""
    from .model import impute
    from .spectral import SpectralConfig

    spectral_config = spectral_config or SpectralConfig()

    def predict(images, masks, rng):
        outs = []
        for i in range(0, len(images), batch_size):
            gen, _ = impute(model, images[i:i + batch_size], masks[i:i + batch_size], schedule, rng, spectral_config)
            outs.append(gen)
        return np.concatenate(outs)

    return predict


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    rows: list  # dicts with REPORT_COLUMNS keys
    diagnostics: list = field(default_factory=list)  # present-channel reconstruction rows
    config: dict = field(default_factory=dict)

    def keys(self) -> list:
        return [(r["modality"], r["config"]) for r in self.rows]

    def mean(self, column: str) -> float:
        return float(np.mean([r[column] for r in self.rows]))

    def row(self, modality: str, config: str) -> dict:
        for r in self.rows:
            if r["modality"] == modality and r["config"] == config:
                return r
        raise KeyError((modality, config))

    def to_jsonl(self) -> str:
        lines = [json.dumps({"section": "config", **self.config}, sort_keys=True)]
        for section, rows in (("missing", self.rows), ("present", self.diagnostics)):
            for r in rows:
                lines.append(json.dumps({"section": section, **{c: _jsonable(r[c]) for c in REPORT_COLUMNS}}))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        out = []
        for title, rows in (("missing-channel synthesis", self.rows), ("present-channel reconstruction (diagnostic)", self.diagnostics)):
            if not rows:
                continue
            out.append(f"# {title}")
            out.append(f"{'modality':<8} {'config':<6} {'n':>4} {'MSE':>10} {'PSNR':>9} {'SSIM':>8}")
            for r in rows:
                p = "identical" if math.isinf(r["psnr"]) else f"{r['psnr']:.3f}"
                out.append(f"{r['modality']:<8} {r['config']:<6} {r['n']:>4d} {r['mse']:>10.6f} {p:>9} {r['ssim']:>8.4f}")
        return "\n".join(out) + "\n"

    def write(self, stem):
        stem = Path(stem)
        Path(f"{stem}.jsonl").write_text(self.to_jsonl())
        Path(f"{stem}.txt").write_text(self.to_table())


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "identical"
    return v


def _aggregate(values: list) -> dict:
    arr = np.array(values, dtype=np.float64)  # columns mse, psnr, ssim
    psnr_vals = arr[:, 1]
    mean_psnr = math.inf if np.all(np.isinf(psnr_vals)) else float(np.mean(psnr_vals[np.isfinite(psnr_vals)]))
    return {"n": len(values), "mse": float(arr[:, 0].mean()), "psnr": mean_psnr, "ssim": float(arr[:, 2].mean())}


def evaluate_split(images: np.ndarray, predictor: Callable, configs: Sequence, rng: np.random.Generator,
                   modality_names: Sequence[str] = DEFAULT_MODALITIES, data_range: float = 1.0,
                   report_config: dict | None = None, diagnostics: bool = True) -> MetricReport:
    """Score a predictor on every sample under every presence configuration.

    `predictor(images, masks, rng)` returns (B, M, H, W) predictions. Missing
    channels are scored against ground truth; present channels go to the
    diagnostic section. PSNR is averaged over finite per-slice values.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("need a non-empty (N, M, H, W) stack")
    if not configs:
        raise ValueError("need at least one presence configuration")
    n, m = images.shape[:2]
    configs = [validate_mask(c, m) for c in configs]
    masks = np.repeat(np.stack(configs), n, axis=0)
    tiled = np.tile(images, (len(configs), 1, 1, 1))
    preds = np.asarray(predictor(tiled, masks, rng))
    rows, diag = [], []
    for ci, cfg in enumerate(configs):
        block = slice(ci * n, (ci + 1) * n)
        for k in range(m):
            scores = [
                (mse(p, g), psnr(p, g, data_range), ssim(p, g, data_range=data_range))
                for p, g in zip(preds[block, k], images[:, k])
            ]
            row = {"modality": modality_names[k], "config": mask_to_str(cfg), **_aggregate(scores)}
            (diag if cfg[k] else rows).append(row)
    order = {name: i for i, name in enumerate(modality_names)}
    rows.sort(key=lambda r: (order[r["modality"]], r["config"]))
    diag.sort(key=lambda r: (order[r["modality"]], r["config"]))
    return MetricReport(rows, diag if diagnostics else [], dict(report_config or {}))


def external_scorer(command: Sequence[str], a: np.ndarray, b: np.ndarray) -> float:
    """Run a perceptual-metric plug-in (e.g. an LPIPS wrapper) on two images.

    The command receives two .npy paths as trailing arguments and must print a
    single float on stdout.
    """
    with tempfile.TemporaryDirectory() as tmp:
        pa, pb = Path(tmp) / "a.npy", Path(tmp) / "b.npy"
        np.save(pa, np.asarray(a, dtype=np.float32))
        np.save(pb, np.asarray(b, dtype=np.float32))
        res = subprocess.run([*command, str(pa), str(pb)], capture_output=True, text=True, check=True)
    return float(res.stdout.strip().split()[-1])
