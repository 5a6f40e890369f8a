"""Image quality metrics for evaluation: PSNR and SSIM on [0, 1] images."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor

PSNR_CAP = 100.0


def psnr(pred: Tensor, target: Tensor, mask: Tensor | None = None) -> float:
    """10 log10(1 / MSE) over masked pixels; exact matches report the cap."""
    err = (pred - target) ** 2
    if mask is not None:
        m = mask.to(pred.dtype)
        if err.ndim == 3:
            m = m.unsqueeze(-1)
        count = float(m.sum()) * (err.shape[-1] if err.ndim == 3 and mask is not None else 1)
        if count == 0:
            return PSNR_CAP
        mse = float((err * m).sum()) / count
    else:
        mse = float(err.mean())
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g.outer(g)


def ssim_map(pred: Tensor, target: Tensor, window_size: int = 11,
             sigma: float = 1.5, data_range: float = 1.0) -> Tensor:
    """Per-pixel SSIM over the valid (un-padded) interior.

    Gaussian-weighted 11x11 windows with the standard stabilizing constants;
    (H, W, C) or (H, W) inputs give an (H-ws+1, W-ws+1) map averaged over
    channels.
    """
    if pred.shape != target.shape:
        raise ValueError("ssim inputs must share a shape")
    if pred.ndim == 2:
        pred = pred.unsqueeze(-1)
        target = target.unsqueeze(-1)
    x = pred.permute(2, 0, 1).unsqueeze(0)
    y = target.permute(2, 0, 1).unsqueeze(0)
    c = x.shape[1]
    win = _gaussian_window(window_size, sigma, x.dtype).expand(c, 1, window_size, window_size)

    mu_x = F.conv2d(x, win, groups=c)
    mu_y = F.conv2d(y, win, groups=c)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_x = F.conv2d(x * x, win, groups=c) - mu_xx
    sigma_y = F.conv2d(y * y, win, groups=c) - mu_yy
    sigma_xy = F.conv2d(x * y, win, groups=c) - mu_xy

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    s = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / ((mu_xx + mu_yy + c1) * (sigma_x + sigma_y + c2))
    return s.squeeze(0).mean(dim=0)


def ssim(pred: Tensor, target: Tensor, mask: Tensor | None = None,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM; with a mask, averaged over masked pixels of the valid interior."""
    s = ssim_map(pred, target, window_size=window_size, sigma=sigma)
    if mask is None:
        return float(s.mean())
    half = window_size // 2
    m = mask[half:-half, half:-half].to(s.dtype)
    count = float(m.sum())
    if count == 0:
        return float(s.mean())
    return float((s * m).sum() / count)
