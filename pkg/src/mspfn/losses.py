"""Training objectives and full-reference quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .pyramid import laplacian_map
from .tensor import ShapeError, Tensor, make_op, no_grad


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-3
    lam: float = 0.05

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class LossTerms:
    total: Tensor
    l_con: float
    l_edge: float


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def charbonnier(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """Mean of ``sqrt((pred - target)^2 + eps^2)``; smooth at zero difference."""
    _same_shape(pred, target, "charbonnier")
    d = pred.data.astype(np.float64) - target.data.astype(np.float64)
    d2 = d * d
    r = np.sqrt(d2 + eps * eps)
    n = d.size
    # eps + mean(r - eps), with r - eps written cancellation-free; exactly eps at d == 0
    out = np.full((1, 1, 1, 1), eps + (d2 / (r + eps)).mean(), dtype=pred.dtype)

    def backward(g):
        gd = (float(g.reshape(-1)[0]) / n) * (d / r)
        return gd.astype(pred.dtype), (-gd).astype(target.dtype)

    return make_op(out, (pred, target), backward, "charbonnier")


def edge_loss(clean: Tensor, derained: Tensor, eps: float = 1e-3) -> Tensor:
    _same_shape(clean, derained, "edge_loss")
    with no_grad():
        lap_clean = laplacian_map(clean)
    return charbonnier(laplacian_map(derained), lap_clean, eps)


def loss_terms(
    residual_pred: Tensor, residual_true: Tensor, clean: Tensor, derained: Tensor, cfg: LossConfig = LossConfig()
) -> LossTerms:
    """Content loss on residuals plus ``lam`` times the edge loss on images."""
    _same_shape(residual_pred, residual_true, "total_loss")
    _same_shape(clean, derained, "total_loss")
    l_con = charbonnier(residual_pred, residual_true, cfg.epsilon)
    l_edge = edge_loss(clean, derained, cfg.epsilon)
    total = l_con + l_edge * cfg.lam
    return LossTerms(total, l_con.item(), l_edge.item())


def total_loss(residual_pred, residual_true, clean, derained, cfg: LossConfig = LossConfig()) -> Tensor:
    return loss_terms(residual_pred, residual_true, clean, derained, cfg).total


# -- metrics ------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


def _as_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected an image of shape (N, C, H, W) or (C, H, W), got {arr.shape}")
    return arr


def to_luma(x) -> np.ndarray:
    """BT.601 luma of an RGB image in [0, 1], keeping a singleton channel axis."""
    arr = _as_array(x)
    if arr.shape[1] != 3:
        raise ShapeError(f"luma conversion needs 3 channels, got {arr.shape[1]}")
    return np.tensordot(_LUMA, arr, axes=([0], [1]))[:, None]


def psnr(a, b, peak: float = 1.0, luma: bool = False) -> float:
    """PSNR in dB; ``inf`` for identical inputs."""
    x, y = (to_luma(a), to_luma(b)) if luma else (_as_array(a), _as_array(b))
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(x, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim_map(a, b, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03, win: int = 11, sigma: float = 1.5):
    """Local SSIM over valid window positions, shape (N, C, H-win+1, W-win+1)."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.shape[2] < win or x.shape[3] < win:
        raise ShapeError(f"ssim needs images of at least {win}x{win}, got {x.shape[2]}x{x.shape[3]}")
    g = _gauss_window(win, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum * cs, cs


def ssim(a, b, peak: float = 1.0, luma: bool = False) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    if luma:
        a, b = to_luma(a), to_luma(b)
    smap, _ = ssim_map(a, b, peak)
    return float(smap.mean())
