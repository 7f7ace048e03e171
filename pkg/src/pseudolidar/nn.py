"""Minimal numpy layer set with hand-written backward passes.

Tensors are ``(N, C, H, W)`` float64 arrays. Each forward returns
``(out, cache)``; the matching backward consumes the cache.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int | None = None):
    """Cross-correlation with zero padding (``pad`` defaults to ``k // 2``)."""
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci} (kernel {w.shape})")
    if b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    pad = k // 2 if pad is None else pad
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.reshape(o, -1)
    out = np.matmul(wm, cols) + b[None, :, None]
    cache = (x.shape, xp.shape, cols, w, stride, pad, ho, wo)
    return out.reshape(n, o, ho, wo), cache


def conv2d_backward(dout: np.ndarray, cache):
    xshape, xpshape, cols, w, stride, pad, ho, wo = cache
    n, c, h, wd = xshape
    o, _, k, _ = w.shape
    d2 = dout.reshape(n, o, ho * wo)
    dw = np.einsum("nop,nqp->oq", d2, cols).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, d2).reshape(n, c, k, k, ho, wo)
    dxp = np.zeros(xpshape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return a + b


def l2_normalize(x: np.ndarray, axis: int = 1, eps: float = 1e-6):
    """``x / sqrt(sum(x**2) + eps)`` along ``axis``."""
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
    y = x / norm
    return y, (y, norm, axis)


def l2_normalize_backward(dout: np.ndarray, cache) -> np.ndarray:
    y, norm, axis = cache
    return (dout - y * (y * dout).sum(axis=axis, keepdims=True)) / norm


def upsample2x_nearest(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_nearest_backward(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` half-pixel-centred linear interpolation weights."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    f = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - f)
    np.add.at(m, (np.arange(n_out), hi), f)
    return m


def upsample_bilinear(x: np.ndarray, out_hw):
    """Resize the last two axes of ``x``; returns ``(out, (Ah, Aw))``."""
    ah = bilinear_matrix(x.shape[-2], out_hw[0])
    aw = bilinear_matrix(x.shape[-1], out_hw[1])
    return ah @ x @ aw.T, (ah, aw)


def upsample_bilinear_backward(dout: np.ndarray, mats) -> np.ndarray:
    ah, aw = mats
    return ah.T @ dout @ aw
