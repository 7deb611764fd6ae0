"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np

from mspfn.tensor import Tensor, mul, sum_all


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    """Direct six-loop cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    assert c == c2
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[bi, oc, i, j] = acc + (0.0 if b is None else b.reshape(-1)[oc])
    return out


def conv2d_transpose_scatter(y, w, b=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution by scattering each input value through the kernel."""
    n, cin, h, wd = y.shape
    cin2, cout, kh, kw = w.shape
    assert cin == cin2
    full = np.zeros((n, cout, (h - 1) * stride + kh + output_padding, (wd - 1) * stride + kw + output_padding))
    for bi in range(n):
        for ic in range(cin):
            for i in range(h):
                for j in range(wd):
                    full[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += y[bi, ic, i, j] * w[ic]
    out = full[:, :, padding : full.shape[2] - padding, padding : full.shape[3] - padding].copy()
    assert out.shape[2] == (h - 1) * stride - 2 * padding + kh + output_padding
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def ssim_naive(x, y, peak=1.0, win=11, sigma=1.5):
    """Per-window SSIM with an explicit 2-D Gaussian window, valid positions only."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    r = np.arange(win) - (win - 1) / 2
    g1 = np.exp(-0.5 * (r / sigma) ** 2)
    g = np.outer(g1, g1)
    g /= g.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    n, c, h, w = x.shape
    vals = []
    for bi in range(n):
        for ch in range(c):
            for i in range(h - win + 1):
                for j in range(w - win + 1):
                    a = x[bi, ch, i : i + win, j : j + win]
                    b = y[bi, ch, i : i + win, j : j + win]
                    ma, mb = (g * a).sum(), (g * b).sum()
                    va = (g * (a - ma) ** 2).sum()
                    vb = (g * (b - mb) ** 2).sum()
                    cov = (g * (a - ma) * (b - mb)).sum()
                    vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def rand(rng, shape, lo=-1.0, hi=1.0, requires_grad=False):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad, dtype=np.float64)


def project(out: Tensor, seed: int = 99) -> Tensor:
    """Reduce a tensor to a scalar through a fixed random weighting."""
    w = np.random.default_rng(seed).uniform(-1, 1, size=out.shape)
    return sum_all(mul(out, Tensor(w, dtype=out.dtype)))
