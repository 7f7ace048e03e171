"""Synthetic stereo + LiDAR scenes with exact ground truth.

A scene is a flat ground plane plus box obstacles, seen by a rectified
stereo pair (left camera at the origin of the camera frame, right camera
at ``+b`` along x) and a LiDAR mounted with a KITTI-like pose. Everything
is ray cast analytically, so depth, LiDAR returns and images agree exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kitti_io
from .evaluation import Box3D, bev_iou
from .geometry import Intrinsics, RigidTransform
from .kitti_io import CalibSet, DepthMap, LabelRecord, RawScan
from .lidar_ops import BeamConfig, render_sparse_depth, sparsify

GROUND_ID = -1
SKY_ID = -2

# LiDAR axes (x fwd, y left, z up) expressed in camera axes (x right, y down, z fwd)
LIDAR_TO_CAM_R = np.array([[0.0, -1.0, 0.0],
                           [0.0, 0.0, -1.0],
                           [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Obstacle:
    box: Box3D
    albedo: float = 0.8
    checker: float = 0.0      # checkerboard contrast in [0, 1)
    checker_size: float = 0.5


@dataclass
class Scene:
    intrinsics: Intrinsics
    baseline: float
    size: tuple                                   # (H, W)
    cam_height: float = 1.65                      # ground plane at y = cam_height
    obstacles: list = field(default_factory=list)
    lidar_mount: RigidTransform = field(
        default_factory=lambda: RigidTransform(LIDAR_TO_CAM_R, np.array([0.0, -0.08, -0.27])))
    ground_albedo: float = 0.5
    ground_checker: float = 0.0
    ground_checker_size: float = 1.0
    light: tuple = (-0.3, -1.0, -0.5)             # direction towards the light, camera frame
    sky_intensity: float = 0.25
    max_range: float = 80.0
    range_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError("stereo baseline must be positive")
        for ob in self.obstacles:
            if ob.box.y > self.cam_height + 1e-9:
                raise ValueError("obstacle extends below the ground plane")

    @property
    def calib(self) -> CalibSet:
        K = self.intrinsics.matrix
        P2 = np.hstack([K, np.zeros((3, 1))])
        P3 = np.hstack([K, np.array([[-self.intrinsics.f_u * self.baseline], [0.0], [0.0]])])
        Tr = np.hstack([self.lidar_mount.R, self.lidar_mount.t[:, None]])
        return CalibSet(P2, P3, np.eye(3), Tr)

    def camera_origin(self, side: str) -> np.ndarray:
        if side == "left":
            return np.zeros(3)
        if side == "right":
            return np.array([self.baseline, 0.0, 0.0])
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")


# --------------------------------------------------------------------------- #
# Ray casting
# --------------------------------------------------------------------------- #

def _rot_y(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _ray_box(o, d, box: Box3D):
    """Entry distance and camera-frame normal of rays against an oriented box."""
    R = _rot_y(box.yaw)
    center = np.array([box.x, box.y - box.h / 2, box.z])
    half = np.array([box.l / 2, box.h / 2, box.w / 2])
    lo_ = (o - center) @ R          # R^T (o - c)
    ld = d @ R
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (-half - lo_) * inv
        t2 = (half - lo_) * inv
    # parallel rays: inside the slab -> (-inf, inf), outside -> empty
    par = ld == 0
    inside = np.abs(lo_) <= half
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=1)
    axis = tmin.argmax(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    t = np.where(hit, t_near, np.inf)
    n_local = np.zeros_like(o)
    rows = np.arange(len(o))
    n_local[rows, axis] = -np.sign(ld[rows, axis])
    return t, n_local @ R.T


def cast_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """First hit per ray: ``(t, object id, hit point, unit normal)``.

    ``t`` is the ray parameter (inf for no hit); ids are obstacle indices,
    ``GROUND_ID`` or ``SKY_ID``.
    """
    origins = np.broadcast_to(origins, dirs.shape).astype(np.float64)
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    ids = np.full(n, SKY_ID, dtype=np.int64)
    normals = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (scene.cam_height - origins[:, 1]) / dirs[:, 1]
    tg = np.where((dirs[:, 1] > 0) & (tg > 0), tg, np.inf)
    better = tg < t_best
    t_best[better] = tg[better]
    ids[better] = GROUND_ID
    normals[better] = (0.0, -1.0, 0.0)
    for i, ob in enumerate(scene.obstacles):
        tb, nb = _ray_box(origins, dirs, ob.box)
        better = tb < t_best
        t_best[better] = tb[better]
        ids[better] = i
        normals[better] = nb[better]
    pts = origins + t_best[:, None] * dirs
    return t_best, ids, pts, normals


def _checker(a, b, size):
    return (np.floor(a / size) + np.floor(b / size)) % 2 * 2 - 1


def surface_albedo(scene: Scene, ids: np.ndarray, pts: np.ndarray) -> np.ndarray:
    alb = np.zeros(len(ids))
    g = ids == GROUND_ID
    if g.any():
        alb[g] = scene.ground_albedo * (
            1 + scene.ground_checker * _checker(pts[g, 0], pts[g, 2], scene.ground_checker_size))
    for i, ob in enumerate(scene.obstacles):
        m = ids == i
        if not m.any():
            continue
        box = ob.box
        local = (pts[m] - np.array([box.x, box.y, box.z])) @ _rot_y(box.yaw)
        pattern = _checker(local[:, 0] + local[:, 2], local[:, 1], ob.checker_size)
        alb[m] = ob.albedo * (1 + ob.checker * pattern)
    return np.clip(alb, 0.0, 1.0)


def pixel_rays(scene: Scene):
    h, w = scene.size
    K = scene.intrinsics
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    dirs = np.stack([(u - K.c_u) / K.f_u, (v - K.c_v) / K.f_v, np.ones_like(u)], axis=-1)
    return dirs.reshape(-1, 3)


def _camera_hits(scene: Scene, side: str):
    dirs = pixel_rays(scene)
    return cast_rays(scene, scene.camera_origin(side), dirs)


def render_depth_gt(scene: Scene, side: str = "left") -> DepthMap:
    """Per-pixel depth ``Z_c`` of the nearest surface; sky and > max_range invalid."""
    h, w = scene.size
    t, ids, _, _ = _camera_hits(scene, side)
    # camera rays have unit z component, so the ray parameter is the depth
    valid = np.isfinite(t) & (t <= scene.max_range)
    depth = np.where(valid, t, 0.0)
    return DepthMap(depth.reshape(h, w), valid.reshape(h, w))


def render_images(scene: Scene):
    """Flat-shaded ``(I_l, I_r)``, each ``H x W x 3`` in [0, 1]."""
    light = np.asarray(scene.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    out = []
    for side in ("left", "right"):
        t, ids, pts, normals = _camera_hits(scene, side)
        hit = np.isfinite(t)
        shade = np.clip(normals @ light, 0.0, None)
        val = np.full(len(t), scene.sky_intensity)
        val[hit] = surface_albedo(scene, ids[hit], pts[hit]) * shade[hit]
        img = val.reshape(scene.size)
        out.append(np.repeat(img[:, :, None], 3, axis=2))
    return out[0], out[1]


def simulate_lidar(scene: Scene, cfg: BeamConfig | None = None, return_ids: bool = False):
    """One ray per (kept elevation bin centre, azimuth cell centre)."""
    cfg = cfg or BeamConfig.full()
    theta = cfg.bin_centers()
    phi = -math.pi + (np.arange(cfg.n_azimuth) + 0.5) * (2 * math.pi / cfg.n_azimuth)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dl = np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), np.sin(th)], axis=-1).reshape(-1, 3)
    mount = scene.lidar_mount
    t, ids, pts_c, _ = cast_rays(scene, mount.t, dl @ mount.R.T)
    hit = np.isfinite(t) & (t <= scene.max_range)
    rng_ = t[hit]
    if scene.range_noise > 0:
        noise = np.random.default_rng([scene.seed, 7]).normal(0.0, scene.range_noise, rng_.shape)
        rng_ = rng_ + noise
    pts_l = dl[hit] * rng_[:, None]
    refl = surface_albedo(scene, ids[hit], pts_c[hit])
    scan = RawScan(np.column_stack([pts_l, refl]))
    if return_ids:
        return scan, ids[hit]
    return scan


# --------------------------------------------------------------------------- #
# Scenes, labels and datasets
# --------------------------------------------------------------------------- #

def default_intrinsics(height: int, width: int) -> Intrinsics:
    f = 0.75 * width
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def random_scene(rng: np.random.Generator, size=(64, 128), n_obstacles=(1, 3),
                 checker: float = 0.35, seed: int = 0) -> Scene:
    h, w = size
    K = default_intrinsics(h, w)
    scene = Scene(K, 0.54, (h, w), ground_checker=checker, seed=seed)
    obstacles = []
    n = int(rng.integers(n_obstacles[0], n_obstacles[1] + 1))
    tries = 0
    while len(obstacles) < n and tries < 100:
        tries += 1
        z = rng.uniform(5.0, 30.0)
        x = rng.uniform(-0.35, 0.35) * z
        box = Box3D(x, scene.cam_height, z, rng.uniform(1.4, 1.7), rng.uniform(1.5, 1.8),
                    rng.uniform(3.5, 4.5), rng.uniform(-math.pi, math.pi))
        if any(bev_iou(box, o.box) > 0 for o in obstacles):
            continue
        obstacles.append(Obstacle(box, albedo=rng.uniform(0.5, 1.0), checker=checker))
    scene.obstacles = obstacles
    return scene


def _project_box(scene: Scene, box: Box3D):
    K = scene.intrinsics
    c = box.corners()
    front = c[:, 2] > 0.1
    if not front.any():
        return None
    c = c[front]
    u = K.f_u * c[:, 0] / c[:, 2] + K.c_u
    v = K.f_v * c[:, 1] / c[:, 2] + K.c_v
    return float(u.min()), float(v.min()), float(u.max()), float(v.max())


def scene_labels(scene: Scene) -> list[LabelRecord]:
    h, w = scene.size
    _, ids, _, _ = _camera_hits(scene, "left")
    ids = ids.reshape(h, w)
    labels = []
    for i, ob in enumerate(scene.obstacles):
        box = ob.box
        raw = _project_box(scene, box)
        if raw is None:
            continue
        x1, y1, x2, y2 = raw
        cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
        cx2, cy2 = min(x2, w - 1.0), min(y2, h - 1.0)
        if cx2 <= cx1 or cy2 <= cy1:
            continue
        full = (x2 - x1) * (y2 - y1)
        trunc = 1.0 - (cx2 - cx1) * (cy2 - cy1) / full if full > 0 else 1.0
        r0, r1 = int(math.floor(cy1)), int(math.ceil(cy2)) + 1
        c0, c1 = int(math.floor(cx1)), int(math.ceil(cx2)) + 1
        region = ids[r0:r1, c0:c1]
        # fraction of the 2D box showing this obstacle, a proxy for occlusion
        vis = float((region == i).mean()) if region.size else 0.0
        occ = 0 if vis > 0.5 else 1 if vis > 0.3 else 2 if vis > 0.1 else 3
        alpha = (box.yaw - math.atan2(box.x, box.z) + math.pi) % (2 * math.pi) - math.pi
        labels.append(LabelRecord("Car", round(float(min(max(trunc, 0.0), 1.0)), 2), occ, float(alpha),
                                  (cx1, cy1, cx2, cy2), (box.h, box.w, box.l),
                                  (box.x, box.y, box.z), box.yaw))
    return labels


@dataclass
class Sample:
    image_l: np.ndarray
    image_r: np.ndarray
    sparse_l: DepthMap
    sparse_r: DepthMap
    gt: DepthMap
    labels: list
    calib: CalibSet
    scan: RawScan | None = None          # full 64-beam scan
    scene: Scene | None = None


def make_sample(scene: Scene, beams: BeamConfig | None = None) -> Sample:
    beams = beams or BeamConfig()
    full = simulate_lidar(scene, BeamConfig.full(beams.n_bins, elev_min=beams.elev_min,
                                                  elev_max=beams.elev_max, n_azimuth=beams.n_azimuth))
    sparse = sparsify(full, beams)
    calib = scene.calib
    I_l, I_r = render_images(scene)
    return Sample(
        image_l=I_l, image_r=I_r,
        sparse_l=render_sparse_depth(sparse, calib, "left", scene.size),
        sparse_r=render_sparse_depth(sparse, calib, "right", scene.size),
        gt=render_depth_gt(scene, "left"),
        labels=scene_labels(scene), calib=calib, scan=full, scene=scene,
    )


def make_dataset(n_scenes: int, seed: int = 0, size=(64, 128), beams: BeamConfig | None = None,
                 checker: float = 0.35) -> list[Sample]:
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    samples = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        samples.append(make_sample(random_scene(rng, size, checker=checker, seed=seed), beams))
    return samples


# --------------------------------------------------------------------------- #
# KITTI-layout export / import
# --------------------------------------------------------------------------- #

SUBDIRS = ("image_2", "image_3", "velodyne", "calib", "label_2", "depth")


def export_dataset(samples, root) -> None:
    root = Path(root)
    for sub in SUBDIRS:
        kitti_io.ensure_dir(root / sub)
    for i, s in enumerate(samples):
        name = kitti_io.frame_name(i)
        kitti_io.write_ppm(s.image_l, root / "image_2" / f"{name}.ppm")
        kitti_io.write_ppm(s.image_r, root / "image_3" / f"{name}.ppm")
        kitti_io.write_velodyne_bin(s.scan, root / "velodyne" / f"{name}.bin")
        (root / "calib" / f"{name}.txt").write_text(s.calib.to_text())
        kitti_io.write_labels(s.labels, root / "label_2" / f"{name}.txt")
        kitti_io.write_depth_image(s.gt, root / "depth" / f"{name}.pgm")


def list_frames(root) -> list[str]:
    return sorted(p.stem for p in (Path(root) / "velodyne").glob("*.bin"))


def load_sample(root, name: str, beams: BeamConfig | None = None) -> Sample:
    """Rebuild a training sample from the on-disk layout."""
    root = Path(root)
    beams = beams or BeamConfig()
    calib = kitti_io.read_calib(root / "calib" / f"{name}.txt")
    I_l = kitti_io.read_ppm(root / "image_2" / f"{name}.ppm")
    I_r = kitti_io.read_ppm(root / "image_3" / f"{name}.ppm")
    size = I_l.shape[:2]
    scan = kitti_io.read_velodyne_bin(root / "velodyne" / f"{name}.bin")
    sparse = sparsify(scan, beams)
    gt_path = root / "depth" / f"{name}.pgm"
    gt = kitti_io.read_depth_image(gt_path) if gt_path.exists() else DepthMap.empty(*size)
    label_path = root / "label_2" / f"{name}.txt"
    labels = kitti_io.read_labels(label_path) if label_path.exists() else []
    return Sample(I_l, I_r,
                  render_sparse_depth(sparse, calib, "left", size),
                  render_sparse_depth(sparse, calib, "right", size),
                  gt, labels, calib, scan)


def load_dataset(root, beams: BeamConfig | None = None) -> list[Sample]:
    return [load_sample(root, name, beams) for name in list_frames(root)]
