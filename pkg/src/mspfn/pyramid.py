"""Gaussian image pyramids and the Laplacian edge map."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, pad_reflect

LAPLACIAN_STENCIL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Separable sampled Gaussian of odd ``size``, normalized to unit sum."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"gaussian kernel size must be a positive odd integer, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    g /= g.sum()
    k = np.outer(g, g)
    return k / k.sum()


def _blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # kernel is an outer product, so filter rows then columns
    g = kernel.sum(axis=1)
    p = len(g) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    tmp = sum(g[i] * xp[:, :, i : i + x.shape[2], :] for i in range(len(g)))
    return sum(g[j] * tmp[:, :, :, j : j + x.shape[3]] for j in range(len(g)))


def downsample(img: Tensor, kernel: np.ndarray | None = None) -> Tensor:
    """Reflect-padded Gaussian blur followed by 2x decimation (floor sizes)."""
    if kernel is None:
        kernel = gaussian_kernel()
    n, c, h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"cannot downsample a {h}x{w} image")
    blurred = _blur(img.data.astype(np.float64), kernel)
    out = blurred[:, :, 0 : 2 * (h // 2) : 2, 0 : 2 * (w // 2) : 2]
    return Tensor(np.ascontiguousarray(out, dtype=img.dtype))


def build_pyramid(img: Tensor, levels: int, kernel: np.ndarray | None = None) -> list[Tensor]:
    """Gaussian pyramid ordered coarsest first; the last entry is ``img`` itself."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    out = [img]
    for _ in range(levels - 1):
        out.append(downsample(out[-1], kernel))
    return out[::-1]


def laplacian_map(img: Tensor) -> Tensor:
    """Per-channel 4-neighbour Laplacian with reflect padding (differentiable)."""
    c = img.shape[1]
    w = np.zeros((c, c, 3, 3), dtype=img.dtype)
    for i in range(c):
        w[i, i] = LAPLACIAN_STENCIL
    return conv2d(pad_reflect(img, 1), Tensor(w))
