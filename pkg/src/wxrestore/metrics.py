"""Charbonnier loss, PSNR and SSIM on ``(N, C, H, W)`` tensors in [0, 1]."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from wxrestore.errors import ShapeError


def _as_pair(a, b, dtype=torch.float64):
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a.to(dtype), b.to(dtype)


def charbonnier_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return torch.sqrt((pred - gt) ** 2 + eps * eps).mean()


def psnr(a, b, max_val: float = 1.0, cap_db: float = 100.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``cap_db`` for (near-)identical inputs."""
    a, b = _as_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse < max_val ** 2 * 10 ** (-cap_db / 10):
        return float(cap_db)
    return 10.0 * math.log10(max_val ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = 11, k1: float = 0.01,
             k2: float = 0.03, L: float = 1.0) -> torch.Tensor:
    """Per-pixel SSIM over valid windows, per channel; differentiable."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    n, c, h, w = a.shape
    if h < window or w < window:
        raise ShapeError(f"image {h}x{w} smaller than SSIM window {window}")
    g = gaussian_window(window, 1.5, a.dtype).to(a.device)
    kh = g.reshape(1, 1, window, 1).repeat(c, 1, 1, 1)
    kw = g.reshape(1, 1, 1, window).repeat(c, 1, 1, 1)

    def blur(x):
        return F.conv2d(F.conv2d(x, kh, groups=c), kw, groups=c)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> float:
    a, b = _as_pair(a, b)
    if torch.equal(a, b):
        return 1.0
    return float(ssim_map(a, b, window, k1, k2, L).mean())
