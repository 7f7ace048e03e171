"""Disparity cost volume, its conversion to a depth cost volume, soft-argmin
depth regression and the smooth-L1 depth loss, each with an exact backward.

Feature maps are ``(C, H, W)`` arrays at 1/``downsample`` of the input
resolution. Cost volumes are ``(K, H, W)``; lower cost means a better match.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StateError

# Cost for disparity shifts that fall off the left edge of the right view.
SENTINEL_COST = 1e6


@dataclass(frozen=True)
class DepthHypothesisGrid:
    d_min: float = 1.0
    d_max: float = 80.0
    k: int = 96

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max) or self.k < 2:
            raise ValueError(f"invalid depth grid [{self.d_min}, {self.d_max}] x {self.k}")

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.d_min, self.d_max, self.k)


@dataclass
class CostVolume:
    kind: str                 # "disparity" or "depth"
    hypotheses: np.ndarray    # (K,) px for disparity, m for depth
    cost: np.ndarray          # (K, H, W)

    def __post_init__(self):
        if self.kind not in ("disparity", "depth"):
            raise ValueError(f"unknown cost-volume kind {self.kind!r}")
        self.hypotheses = np.asarray(self.hypotheses, dtype=np.float64)
        if np.any(np.diff(self.hypotheses) <= 0):
            raise ValueError("hypotheses must be strictly increasing")
        if self.cost.shape[0] != self.hypotheses.shape[0]:
            raise ShapeError("cost volume depth axis does not match hypotheses")


def build_dicv(left: np.ndarray, right: np.ndarray, max_disp: int) -> CostVolume:
    """``cost[d, v, u] = -<left[:, v, u], right[:, v, u - d]>``."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 3:
        raise ShapeError(f"feature shapes differ or are not (C, H, W): {left.shape} vs {right.shape}")
    if max_disp < 1:
        raise ValueError("max_disp must be at least 1")
    _, h, w = left.shape
    cost = np.full((max_disp, h, w), SENTINEL_COST)
    for d in range(min(max_disp, w)):
        cost[d, :, d:] = -np.einsum("chw,chw->hw", left[:, :, d:], right[:, :, :w - d])
    return CostVolume("disparity", np.arange(max_disp, dtype=np.float64), cost)


def build_dicv_backward(dcost: np.ndarray, left: np.ndarray, right: np.ndarray):
    dleft = np.zeros_like(left)
    dright = np.zeros_like(right)
    w = left.shape[2]
    for d in range(min(dcost.shape[0], w)):
        g = dcost[d, :, d:]
        dleft[:, :, d:] -= g[None] * right[:, :, :w - d]
        dright[:, :, :w - d] -= g[None] * left[:, :, d:]
    return dleft, dright


def decv_sampling(depths: np.ndarray, n_disp: int, f_u: float, b: float, downsample: int = 4):
    """Interpolation knots ``(lo, hi, frac)`` of each depth on the disparity axis."""
    d = f_u * b / (downsample * np.asarray(depths, dtype=np.float64))
    d = np.clip(d, 0.0, n_disp - 1)
    lo = np.floor(d).astype(np.int64)
    lo = np.minimum(lo, n_disp - 1)
    hi = np.minimum(lo + 1, n_disp - 1)
    frac = d - lo
    return lo, hi, frac


def dicv_to_decv(cv: CostVolume, grid: DepthHypothesisGrid, f_u: float, b: float,
                 downsample: int = 4) -> CostVolume:
    if cv.kind != "disparity":
        raise TypeError(f"dicv_to_decv needs a disparity volume, got {cv.kind!r}")
    depths = grid.values
    lo, hi, frac = decv_sampling(depths, cv.cost.shape[0], f_u, b, downsample)
    f = frac[:, None, None]
    cost = (1.0 - f) * cv.cost[lo] + f * cv.cost[hi]
    return CostVolume("depth", depths, cost)


def dicv_to_decv_backward(dcost_depth: np.ndarray, n_disp: int, lo, hi, frac) -> np.ndarray:
    dcost = np.zeros((n_disp,) + dcost_depth.shape[1:])
    f = frac[:, None, None]
    np.add.at(dcost, lo, (1.0 - f) * dcost_depth)
    np.add.at(dcost, hi, f * dcost_depth)
    return dcost


def softmax_neg(cost: np.ndarray) -> np.ndarray:
    """Softmax of ``-cost`` over axis 0 with max-subtraction."""
    z = -cost
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def soft_argmin(cv: CostVolume):
    """Return ``(depth (H, W), weights (K, H, W))``."""
    if cv.kind != "depth":
        raise TypeError(f"soft_argmin expects a depth volume, got {cv.kind!r}")
    z = -cv.cost
    e = np.exp(z - z.max(axis=0, keepdims=True))
    s = e.sum(axis=0)
    # normalise after the weighted sum so a uniform cost gives the exact mean
    depth = (e * cv.hypotheses[:, None, None]).sum(axis=0) / s
    return depth, e / s


def soft_argmin_backward(ddepth: np.ndarray, weights: np.ndarray, hypotheses: np.ndarray,
                         depth: np.ndarray) -> np.ndarray:
    # d out / d cost_k = -w_k (D_k - out)
    return -weights * (hypotheses[:, None, None] - depth[None]) * ddepth[None]


def smooth_l1_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    """Mean smooth-L1 over ``mask``; returns ``(loss, d loss / d pred)``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != pred.shape:
        raise ShapeError("pred, gt and mask must share a shape")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("smooth_l1_loss: empty mask, mean is undefined")
    x = np.where(mask, pred - gt, 0.0)
    ax = np.abs(x)
    quad = ax < 1.0
    per = np.where(quad, 0.5 * x * x, ax - 0.5)
    loss = float(per[mask].sum() / n)
    grad = np.where(quad, x, np.sign(x)) / n
    grad[~mask] = 0.0
    return loss, grad


class DeCVRegressor:
    """Features -> DiCV -> (optional aggregation) -> DeCV -> soft-argmin depth.

    ``forward`` saves what ``backward`` needs. ``aggregation`` is any object
    with ``forward(cost, left) -> cost`` and ``backward(dcost) -> (dcost, dleft)``.
    """

    def __init__(self, max_disp: int, grid: DepthHypothesisGrid, f_u: float, b: float,
                 downsample: int = 4, aggregation=None):
        self.max_disp = max_disp
        self.grid = grid
        self.f_u = f_u
        self.b = b
        self.downsample = downsample
        self.aggregation = aggregation
        self._saved = None

    def forward(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        dicv = build_dicv(left, right, self.max_disp)
        cost = dicv.cost
        if self.aggregation is not None:
            cost = self.aggregation.forward(cost, left)
            dicv = CostVolume("disparity", dicv.hypotheses, cost)
        decv = dicv_to_decv(dicv, self.grid, self.f_u, self.b, self.downsample)
        depth, weights = soft_argmin(decv)
        knots = decv_sampling(decv.hypotheses, self.max_disp, self.f_u, self.b, self.downsample)
        self._saved = (left, right, weights, depth, knots)
        return depth

    def backward(self, ddepth: np.ndarray):
        """Gradient of the upstream loss w.r.t. ``(left, right)`` features."""
        if self._saved is None:
            raise StateError("backward called before forward")
        left, right, weights, depth, (lo, hi, frac) = self._saved
        dcost_depth = soft_argmin_backward(ddepth, weights, self.grid.values, depth)
        dcost = dicv_to_decv_backward(dcost_depth, self.max_disp, lo, hi, frac)
        dleft_extra = 0.0
        if self.aggregation is not None:
            dcost, dleft_extra = self.aggregation.backward(dcost)
        dleft, dright = build_dicv_backward(dcost, left, right)
        return dleft + dleft_extra, dright
