"""Dense depth map -> pseudo-LiDAR point cloud, plus detector-facing cleanup."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import backproject, cam_to_lidar
from .kitti_io import CalibSet, DepthMap, RawScan
from .lidar_ops import BeamConfig, _first_min_per_key, azimuth_cells, point_bins


@dataclass
class PseudoCloud:
    """LiDAR-frame points ``(x, y, z, reflectance)`` with their source pixel ``(u, v)``."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(self.points) != len(self.pixels):
            raise ValueError("points and pixels must have the same length")

    def __len__(self):
        return self.points.shape[0]

    def take(self, idx) -> "PseudoCloud":
        return PseudoCloud(self.points[idx], self.pixels[idx])

    def to_scan(self) -> RawScan:
        return RawScan(self.points.copy())


def depth_to_cloud(D: DepthMap, calib: CalibSet, side: str = "left") -> PseudoCloud:
    """Back-project every valid pixel and move it into the LiDAR frame."""
    rows, cols = np.nonzero(D.valid)
    uvz = np.column_stack([cols.astype(np.float64), rows.astype(np.float64), D.depth[rows, cols]])
    if len(uvz) == 0:
        return PseudoCloud()
    cam = backproject(uvz, calib.intrinsics)
    xyz = cam_to_lidar(cam, calib.extrinsic(side))
    pts = np.column_stack([xyz, np.ones(len(xyz))])
    return PseudoCloud(pts, np.column_stack([cols, rows]))


def postprocess(c: PseudoCloud, height_ceiling: float = 1.0) -> PseudoCloud:
    """Force reflectance to 1 and drop points with ``z > height_ceiling``."""
    out = c.take(c.points[:, 2] <= height_ceiling)
    out.points[:, 3] = 1.0
    return out


def subsample_to_beams(c: PseudoCloud, cfg: BeamConfig | None = None) -> PseudoCloud:
    """Keep the nearest point per (elevation bin, azimuth cell)."""
    cfg = cfg or BeamConfig.full()
    if len(c) == 0:
        return c.take(slice(None))
    xyz = c.points[:, :3]
    bins = point_bins(xyz, cfg)
    in_kept = np.isin(bins, cfg.kept_bins)
    cells = azimuth_cells(xyz, cfg.n_azimuth)
    key = bins * cfg.n_azimuth + cells
    rng = np.linalg.norm(xyz, axis=1)
    idx = np.flatnonzero(in_kept)
    keep = idx[_first_min_per_key(key[idx], rng[idx])]
    return c.take(np.sort(keep))
