"""Reconstruction quality metrics: PSNR and multi-scale SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

__all__ = ["MetricReport", "psnr", "ms_ssim", "PSNR_CAP"]

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
K1, K2 = 0.01, 0.03


@dataclass
class MetricReport:
    """Per-frame metric values plus aggregates."""

    psnr_db: list
    ms_ssim: list

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def mean_ms_ssim(self) -> float:
        return float(np.mean(self.ms_ssim))

    @property
    def std_psnr(self) -> float:
        return float(np.std(self.psnr_db))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10 log10(peak^2 / MSE); identical frames report the 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(peak * peak / mse)), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter2(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = convolve1d(img, kernel, axis=0, mode="reflect")
    return convolve1d(out, kernel, axis=1, mode="reflect")


def _ssim_channel(a, b, peak, kernel):
    c1 = (K1 * peak) ** 2
    c2 = (K2 * peak) ** 2
    mu_a = _filter2(a, kernel)
    mu_b = _filter2(b, kernel)
    var_a = _filter2(a * a, kernel) - mu_a**2
    var_b = _filter2(b * b, kernel) - mu_b**2
    cov = _filter2(a * b, kernel) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2]) / 4.0


def ms_ssim(
    a: np.ndarray,
    b: np.ndarray,
    peak: float = 255.0,
    allow_scale_reduction: bool = True,
) -> float:
    """Multi-scale SSIM with the standard 5-scale weights.

    Accepts (H, W) or (3, H, W) / (H, W, 3) frames; channels are averaged.
    Frames smaller than 176x176 use fewer scales (weights renormalized)
    unless allow_scale_reduction is disabled, in which case they error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        chans = [(a, b)]
    elif a.ndim == 3 and a.shape[0] == 3:
        chans = [(a[c], b[c]) for c in range(3)]
    elif a.ndim == 3 and a.shape[-1] == 3:
        chans = [(a[..., c], b[..., c]) for c in range(3)]
    else:
        raise ValueError(f"unsupported frame shape {a.shape}")

    kernel = _gaussian_kernel()
    min_dim = min(chans[0][0].shape)
    # each scale halves the frame; the 11-tap window must still fit
    levels = 5
    while levels > 1 and (min_dim >> (levels - 1)) < 11:
        levels -= 1
    if levels < 5 and not allow_scale_reduction:
        raise ValueError(
            f"frame min dimension {min_dim} supports only {levels} scales; "
            f"need >= 176 px for 5 scales"
        )
    weights = MS_SSIM_WEIGHTS[:levels]
    weights = weights / weights.sum()

    vals = []
    for ca, cb in chans:
        mcs = []
        x, y = ca, cb
        for lv in range(levels):
            ssim_full, cs = _ssim_channel(x, y, peak, kernel)
            if lv == levels - 1:
                mcs.append(ssim_full)
            else:
                mcs.append(cs)
                x, y = _downsample2(x), _downsample2(y)
        mcs = np.clip(np.array(mcs), 1e-8, None)
        vals.append(float(np.prod(mcs**weights)))
    return float(np.clip(np.mean(vals), 0.0, 1.0))
