"""High-frequency feature images: Fourier high-pass, inverse magnitude, histogram equalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NYQUIST_RADIUS = 0.5  # cycles per pixel


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralConfig:
    cutoff_radius: float = 0.25  # fraction of the Nyquist radius
    smoothness: float = 1.0
    equalization_bins: int = 256

    def __post_init__(self):
        if not 0.0 < self.cutoff_radius < 1.0:
            raise SpectralError("cutoff_radius must lie in (0, 1)")
        if self.smoothness <= 0:
            raise SpectralError("smoothness must be > 0")
        if self.equalization_bins < 2:
            raise SpectralError("equalization_bins must be >= 2")


@dataclass(frozen=True)
class HighPassFilter:
    gain: np.ndarray  # (H, W), DC at the centre (fftshift layout)
    cutoff_radius: float
    smoothness: float

    @property
    def shape(self):
        return self.gain.shape


def radial_frequency(h: int, w: int) -> np.ndarray:
    """DC-centred radial frequency in cycles/pixel, laid out like np.fft.fftshift."""
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def build_high_pass_filter(h: int, w: int, config: SpectralConfig = SpectralConfig()) -> HighPassFilter:
    """Gaussian high-pass gain 1 - exp(-r^2 / (2 s^2)), s = cutoff * nyquist * smoothness."""
    if h < 2 or w < 2:
        raise SpectralError("filter needs H, W >= 2")
    r = radial_frequency(h, w)
    s = config.cutoff_radius * NYQUIST_RADIUS * config.smoothness
    gain = 1.0 - np.exp(-(r**2) / (2.0 * s**2))
    gain[h // 2, w // 2] = 0.0
    return HighPassFilter(gain, config.cutoff_radius, config.smoothness)


def extract_high_freq(image, filt: HighPassFilter) -> np.ndarray:
    """|IFFT(FFT(image) * gain)| for an (..., H, W) array."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != filt.shape:
        raise SpectralError(f"image shape {image.shape[-2:]} does not match filter {filt.shape}")
    if not np.all(np.isfinite(image)):
        raise SpectralError("image contains non-finite values")
    gain = np.fft.ifftshift(filt.gain)
    spectrum = np.fft.fft2(image, axes=(-2, -1)) * gain
    return np.abs(np.fft.ifft2(spectrum, axes=(-2, -1)))


def histogram_equalize(image, bins: int = 256) -> np.ndarray:
    """Map each pixel to the empirical CDF of its histogram bin.

    Bins span [min, max] of the image, so the brightest pixel always maps to 1.
    Constant images have no meaningful CDF and map to zeros.
    """
    if bins < 2:
        raise SpectralError("bins must be >= 2")
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise SpectralError("image contains non-finite values")
    if image.size and image.min() < 0:
        raise SpectralError("histogram equalisation expects non-negative input")
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    idx = np.floor((image - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    counts = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(counts) / image.size
    return cdf[idx]


def spectral_features(stack, config: SpectralConfig = SpectralConfig(), filt: HighPassFilter | None = None) -> np.ndarray:
    """Equalised high-frequency image for every channel of an (M, H, W) or (B, M, H, W) stack.

    Constant channels (including blanked modalities) give all-zero features.
    """
    stack = np.asarray(stack, dtype=np.float64)
    h, w = stack.shape[-2:]
    if filt is None:
        filt = build_high_pass_filter(h, w, config)
    flat = stack.reshape(-1, h, w)
    high = extract_high_freq(flat, filt)
    out = np.zeros_like(flat)
    for k in range(flat.shape[0]):
        if np.ptp(flat[k]) == 0:
            continue
        out[k] = histogram_equalize(high[k], config.equalization_bins)
    return out.reshape(stack.shape).astype(np.float32)
