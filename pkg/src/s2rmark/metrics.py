"""Image quality and distribution metrics on the denormalized 0-255 scale."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .core import denormalize

PSNR_CAP_DB = 100.0


def _to_255(img: torch.Tensor) -> torch.Tensor:
    return img.detach().to(torch.float32) * 127.5 + 127.5


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 * log10(255^2 / MSE) on the 0-255 scale, capped at 100 dB for identical images."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = ((_to_255(a) - _to_255(b)) ** 2).mean().item()
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(255.0 ** 2 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    t = torch.arange(size, dtype=torch.float32) - (size - 1) / 2.0
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k2 = torch.outer(k, k)
    return k2 / k2.sum()


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Single-scale SSIM: 11x11 Gaussian window sigma 1.5, constants from range 255.

    Local statistics are taken over valid window placements and averaged over
    channels.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < 11:
        raise ValueError(f"image {tuple(a.shape[-2:])} is smaller than the 11x11 window")
    x = _to_255(a).double()
    y = _to_255(b).double()
    if x.dim() == 3:
        x, y = x[None], y[None]
    c = x.shape[1]
    w = _gaussian_window().double().expand(c, 1, 11, 11).contiguous()

    def smooth(t):
        return F.conv2d(t, w, groups=c)

    mu_x, mu_y = smooth(x), smooth(y)
    var_x = smooth(x * x) - mu_x ** 2
    var_y = smooth(y * y) - mu_y ** 2
    cov = smooth(x * y) - mu_x * mu_y
    c1, c2 = (0.01 * 255.0) ** 2, (0.03 * 255.0) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return (num / den).mean().item()


def _set_histogram(images) -> np.ndarray:
    """Per-channel 256-bin histogram accumulated over a set, normalized to sum 1."""
    if not len(images):
        raise ValueError("hist_compare needs non-empty image sets")
    channels = images[0].shape[0]
    counts = np.zeros((channels, 256), dtype=np.float64)
    for img in images:
        u8 = denormalize(img)
        for ch in range(channels):
            counts[ch] += np.bincount(u8[:, :, ch].reshape(-1), minlength=256)
    return counts / counts.sum(axis=1, keepdims=True)


def hist_compare(set_a, set_b):
    """Compare average pixel-intensity histograms of two image sets.

    Returns (distance, curves): distance is the mean per-bin L1 difference of
    the normalized per-channel histograms averaged over channels; curves carry
    the channel-averaged per-bin frequencies for plotting and CSV emission.
    """
    ha, hb = _set_histogram(set_a), _set_histogram(set_b)
    distance = float(np.abs(ha - hb).mean())
    curves = {
        "bin": np.arange(256),
        "freq_a": ha.mean(axis=0),
        "freq_b": hb.mean(axis=0),
        "per_channel_a": ha,
        "per_channel_b": hb,
    }
    return distance, curves
