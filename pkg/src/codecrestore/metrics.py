"""Image quality metrics: exact PSNR/SSIM plus a fixed-feature perceptual distance.

PSNR and SSIM operate on 8-bit numpy rasters. The perceptual distance is a
torch module (differentiable w.r.t. its inputs) built from a frozen,
seed-pinned random conv stack; it is a stand-in for a pretrained perceptual
metric and is honest about being one. A small pixel-space L1 term makes it a
true metric (zero iff the inputs are equal).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from scipy.signal import correlate2d

from .errors import ShapeError

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Any change to the feature stack or this seed changes perceptual-distance
# values across the board; bump only together with the checkpoint format.
_PERCEPTUAL_SEED = 913278


def _as_float_image(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"expected HxW or HxWxC raster, got shape {a.shape}")
    return a.astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for 8-bit rasters.

    Identical inputs (and anything above the cap) report the documented
    100 dB sentinel instead of infinity.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(255.0 ** 2 / mse)), PSNR_CAP_DB)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian window used by ssim."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity for 8-bit rasters.

    Gaussian-weighted 11x11 window statistics over valid window positions
    only (no padding), averaged over positions and channels.
    """
    a = _as_float_image(a)
    b = _as_float_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(
            f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )
    win = gaussian_window()
    c1 = (SSIM_K1 * 255.0) ** 2
    c2 = (SSIM_K2 * 255.0) ** 2

    channel_means = []
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        mu_x = correlate2d(x, win, mode="valid")
        mu_y = correlate2d(y, win, mode="valid")
        # Weighted second moments; variance/covariance follow by subtraction.
        sxx = correlate2d(x * x, win, mode="valid") - mu_x ** 2
        syy = correlate2d(y * y, win, mode="valid") - mu_y ** 2
        sxy = correlate2d(x * y, win, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        channel_means.append(np.mean(num / den))
    return float(np.mean(channel_means))


class PerceptualDistance(nn.Module):
    """Fixed random-feature distance standing in for a learned perceptual metric.

    Three frozen conv layers with weights drawn from a pinned seed; the
    distance is the sum of RMS feature distances per layer plus a small
    pixel-space L1 term, which makes it symmetric, zero iff equal, and a
    metric (each term is a scaled norm of a difference).
    """

    def __init__(self, pixel_weight: float = 0.1, seed: int = _PERCEPTUAL_SEED):
        super().__init__()
        self.pixel_weight = pixel_weight
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList(
            [
                nn.Conv2d(3, 16, 3, stride=2, padding=1),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 32, 3, stride=1, padding=1),
            ]
        )
        for conv in self.layers:
            nn.init.normal_(conv.weight, std=0.2, generator=gen)
            nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.layers:
            h = torch.relu(conv(h))
            feats.append(h)
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"perceptual distance shape mismatch: {a.shape} vs {b.shape}")
        squeeze = a.dim() == 3
        if squeeze:
            a = a.unsqueeze(0)
            b = b.unsqueeze(0)
        dist = self.pixel_weight * torch.mean(torch.abs(a - b), dim=(1, 2, 3))
        # sqrt(ms + eps) - sqrt(eps): exact zero at equality, smooth elsewhere,
        # concave in the norm so the triangle inequality survives.
        eps = torch.as_tensor(1e-24, dtype=a.dtype, device=a.device)
        for fa, fb in zip(self.features(a), self.features(b)):
            ms = torch.mean((fa - fb) ** 2, dim=(1, 2, 3))
            dist = dist + torch.sqrt(ms + eps) - torch.sqrt(eps)
        return dist.squeeze(0) if squeeze else dist


_PDIST_SINGLETON: PerceptualDistance | None = None


def perceptual_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Perceptual distance between two 8-bit rasters (numpy convenience path)."""
    global _PDIST_SINGLETON
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"perceptual distance shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 raster, got {a.shape}")
    if _PDIST_SINGLETON is None:
        _PDIST_SINGLETON = PerceptualDistance()
    ta = torch.from_numpy(a.astype(np.float32) / 255.0).permute(2, 0, 1)
    tb = torch.from_numpy(b.astype(np.float32) / 255.0).permute(2, 0, 1)
    with torch.no_grad():
        return float(_PDIST_SINGLETON(ta, tb))
