"""Beam sparsification of LiDAR scans and sparse depth-map rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import lidar_to_cam
from .kitti_io import CalibSet, DepthMap, RawScan

DEFAULT_ELEV_MIN = math.radians(-24.9)
DEFAULT_ELEV_MAX = math.radians(2.0)


def _default_kept_bins(n_bins=64, elev_min=DEFAULT_ELEV_MIN, elev_max=DEFAULT_ELEV_MAX,
                       n_beams=4, lo_deg=-2.5, hi_deg=0.5):
    angles = np.radians(np.linspace(lo_deg, hi_deg, n_beams))
    return sorted({int(b) for b in elevation_bins(angles, n_bins, elev_min, elev_max)})


@dataclass(frozen=True)
class BeamConfig:
    n_bins: int = 64
    elev_min: float = DEFAULT_ELEV_MIN
    elev_max: float = DEFAULT_ELEV_MAX
    kept_bins: tuple = field(default_factory=lambda: tuple(_default_kept_bins()))
    n_azimuth: int = 2048

    def __post_init__(self):
        object.__setattr__(self, "kept_bins", tuple(sorted(int(b) for b in self.kept_bins)))
        if not self.elev_min < self.elev_max:
            raise DomainError("elev_min must be below elev_max")
        if self.n_bins < 1 or self.n_azimuth < 1:
            raise DomainError("bin counts must be positive")
        if not self.kept_bins:
            raise DomainError("kept_bins must not be empty")
        if self.kept_bins[0] < 0 or self.kept_bins[-1] >= self.n_bins:
            raise DomainError(f"kept_bins must lie in [0, {self.n_bins})")
        if len(set(self.kept_bins)) != len(self.kept_bins):
            raise DomainError("kept_bins contains duplicates")

    @classmethod
    def full(cls, n_bins=64, **kw) -> "BeamConfig":
        return cls(n_bins=n_bins, kept_bins=tuple(range(n_bins)), **kw)

    @classmethod
    def beams(cls, n_beams: int, lo_deg=-2.5, hi_deg=0.5, **kw) -> "BeamConfig":
        """``n_beams`` bins spread uniformly over ``[lo_deg, hi_deg]``.

        ``n_beams == n_bins`` selects the full sensor.
        """
        n_bins = kw.pop("n_bins", 64)
        if n_beams >= n_bins:
            return cls.full(n_bins, **kw)
        elev_min = kw.get("elev_min", DEFAULT_ELEV_MIN)
        elev_max = kw.get("elev_max", DEFAULT_ELEV_MAX)
        kept = _default_kept_bins(n_bins, elev_min, elev_max, n_beams, lo_deg, hi_deg)
        return cls(n_bins=n_bins, kept_bins=tuple(kept), **kw)

    @property
    def bin_width(self) -> float:
        return (self.elev_max - self.elev_min) / self.n_bins

    def bin_centers(self, bins=None) -> np.ndarray:
        bins = np.asarray(self.kept_bins if bins is None else bins, dtype=np.float64)
        return self.elev_min + (bins + 0.5) * self.bin_width

    def to_dict(self) -> dict:
        return {"n_bins": self.n_bins, "elev_min": self.elev_min, "elev_max": self.elev_max,
                "kept_bins": list(self.kept_bins), "n_azimuth": self.n_azimuth}


def elevation_angle(p) -> float:
    x, y, z = (float(c) for c in p[:3])
    if x == 0.0 and y == 0.0:
        raise DomainError("elevation undefined for a point on the vertical axis")
    return math.atan2(z, math.hypot(x, y))


def elevation_bins(theta, n_bins, elev_min, elev_max) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    idx = np.floor((theta - elev_min) / (elev_max - elev_min) * n_bins)
    return np.clip(idx, 0, n_bins - 1).astype(np.int64)


def point_bins(xyz: np.ndarray, cfg: BeamConfig) -> np.ndarray:
    theta = np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1]))
    return elevation_bins(theta, cfg.n_bins, cfg.elev_min, cfg.elev_max)


def azimuth_cells(xyz: np.ndarray, n_cells: int) -> np.ndarray:
    phi = np.arctan2(xyz[:, 1], xyz[:, 0])
    idx = np.floor((phi + np.pi) / (2 * np.pi) * n_cells)
    return np.clip(idx, 0, n_cells - 1).astype(np.int64)


def sparsify(scan: RawScan, cfg: BeamConfig) -> RawScan:
    """Keep the points whose elevation bin is in ``cfg.kept_bins``."""
    if len(scan) == 0:
        return RawScan(scan.points.copy())
    keep = np.isin(point_bins(scan.xyz, cfg), cfg.kept_bins)
    return RawScan(scan.points[keep])


def _first_min_per_key(keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Index of the smallest value per key; ties go to the earliest index."""
    order = np.lexsort((np.arange(len(keys)), values, keys))
    first = np.ones(len(order), dtype=bool)
    first[1:] = keys[order][1:] != keys[order][:-1]
    return np.sort(order[first])


def render_sparse_depth(scan: RawScan, calib: CalibSet, side: str, size) -> DepthMap:
    """Project a scan into one stereo camera with nearest-depth z-buffering."""
    height, width = size
    dm = DepthMap.empty(height, width)
    if len(scan) == 0:
        return dm
    pc = lidar_to_cam(scan.xyz, calib.extrinsic(side))
    z = pc[:, 2]
    front = z > 0
    pc, z = pc[front], z[front]
    K = calib.intrinsics
    u = K.f_u * pc[:, 0] / z + K.c_u
    v = K.f_v * pc[:, 1] / z + K.c_v
    col = np.floor(u + 0.5).astype(np.int64)
    row = np.floor(v + 0.5).astype(np.int64)
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    col, row, z = col[inside], row[inside], z[inside]
    if z.size == 0:
        return dm
    flat = row * width + col
    best = np.full(height * width, np.inf)
    np.minimum.at(best, flat, z)
    hit = np.isfinite(best)
    dm.depth.reshape(-1)[hit] = best[hit]
    dm.valid.reshape(-1)[hit] = True
    return dm
