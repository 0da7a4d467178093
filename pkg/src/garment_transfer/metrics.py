"""Image and mesh evaluation metrics."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .core import ValidationError


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean structural similarity over channels and all fully-inside windows.

    Accepts ``(B, C, H, W)``/``(C, H, W)`` tensors or ``(H, W, C)`` arrays;
    computed in double precision.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValidationError(f"ssim inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValidationError(f"images must be at least {window}x{window}")
    c = a.shape[1]
    w = gaussian_window(window, sigma).expand(c, 1, window, window)
    filt = lambda x: F.conv2d(x, w, groups=c)  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float((num / den).mean())


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        if x.ndim != 3:
            raise ValidationError("numpy images must be (H, W, C)")
        x = torch.from_numpy(np.ascontiguousarray(x)).permute(2, 0, 1)
    x = x.detach().to(torch.float64)
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4:
        raise ValidationError("expected a (B, C, H, W) or (C, H, W) image")
    return x


def occupancy_accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(((np.asarray(pred) > 0.5) == (np.asarray(labels) > 0.5)).mean())
