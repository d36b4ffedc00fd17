"""Image-similarity and action-grid primitives shared by both monitors.

SSIM here uses a uniform (box) window, stride 1 and valid padding, with the
usual constants ``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2``.  Multi-channel
images are scored per channel and averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

K1 = 0.01
K2 = 0.03


def ssim_map(x: torch.Tensor, y: torch.Tensor, kernel: int = 5,
             data_range: float = 1.0) -> torch.Tensor:
    """Local SSIM indices for batched images of shape (B, C, H, W).

    Returns a tensor of shape (B, C, H - kernel + 1, W - kernel + 1).
    Differentiable in both arguments.
    """
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x = F.avg_pool2d(x, kernel, stride=1)
    mu_y = F.avg_pool2d(y, kernel, stride=1)
    xx = F.avg_pool2d(x * x, kernel, stride=1)
    yy = F.avg_pool2d(y * y, kernel, stride=1)
    xy = F.avg_pool2d(x * y, kernel, stride=1)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def batch_ssim(x: torch.Tensor, y: torch.Tensor, kernel: int = 5,
               data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM per batch element for (B, C, H, W) tensors -> shape (B,)."""
    return ssim_map(x, y, kernel, data_range).mean(dim=(1, 2, 3))


def _check_pair(a, b, kernel: int) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {tuple(a.shape)}")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {kernel}")
    h, w = a.shape[-2:]
    if kernel > min(h, w):
        raise ValueError(f"kernel {kernel} larger than image {h}x{w}")


def _as_batch(a) -> torch.Tensor:
    t = torch.as_tensor(a)
    if not t.is_floating_point():
        t = t.double()
    if t.ndim == 2:
        t = t[None]
    return t[None]


def ssim(a, b, kernel: int = 5, data_range: float = 1.0) -> float:
    """Mean structural similarity of two images.

    ``a`` and ``b`` are grayscale (H, W) or channel-first (C, H, W) arrays or
    tensors of identical shape.  NumPy inputs are evaluated in float64.
    """
    _check_pair(a, b, kernel)
    x, y = _as_batch(a), _as_batch(b)
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        x, y = x.double(), y.double()
    with torch.no_grad():
        return float(batch_ssim(x, y, kernel, data_range)[0])


def dssim(a, b, kernel: int = 5, data_range: float = 1.0) -> float:
    """Structural dissimilarity ``(1 - SSIM) / 2``, in [0, 1]."""
    return (1.0 - ssim(a, b, kernel, data_range)) / 2.0


@dataclass(frozen=True)
class ActionGrid:
    """``n`` equally spaced candidate steering commands on ``[lo, hi]``."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("grid bounds must be finite")
        if self.lo >= self.hi:
            raise ValueError(f"need lo < hi, got lo={self.lo}, hi={self.hi}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"need at least 2 grid points, got {self.n}")

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    def __len__(self) -> int:
        return self.n


def make_action_grid(lo: float, hi: float, n: int) -> ActionGrid:
    return ActionGrid(float(lo), float(hi), int(n))


# Distances closer than this are treated as ties (resolved to the lower index).
_TIE_TOL = 1e-12


def nearest_action_index(u: float, grid: ActionGrid) -> int:
    """Index of the grid value closest to ``u``; out-of-range ``u`` clamps."""
    dist = np.abs(grid.values - float(u))
    return int(np.flatnonzero(dist <= dist.min() + _TIE_TOL)[0])


def argmin_lowest(scores) -> int:
    """argmin with ties broken toward the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    return int(np.flatnonzero(s == s.min())[0])
