"""Depth-completion metrics and KITTI-style BEV / 3D average precision."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .kitti_io import DepthMap, LabelRecord

DIFFICULTIES = ("easy", "moderate", "hard")
# KITTI devkit thresholds: (min bbox height px, max occlusion, max truncation)
DIFFICULTY_RULES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}
DEPTH_RANGE = (1.0, 80.0)


# --------------------------------------------------------------------------- #
# Depth metrics
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class DepthMetrics:
    rmse_mm: float
    mae_mm: float
    irmse: float
    imae: float

    def to_dict(self) -> dict:
        return {"rmse_mm": self.rmse_mm, "mae_mm": self.mae_mm, "irmse": self.irmse, "imae": self.imae}


def depth_metrics(pred: DepthMap, gt: DepthMap, depth_range=DEPTH_RANGE) -> DepthMetrics:
    """RMSE/MAE in mm and iRMSE/iMAE in 1/km over valid gt pixels in range."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    lo, hi = depth_range
    sel = gt.valid & (gt.depth >= lo) & (gt.depth <= hi)
    if not sel.any():
        raise ValueError("no valid ground-truth pixel in the evaluation range")
    p = pred.depth[sel]
    g = gt.depth[sel]
    if np.any(~(p > 0)):
        raise ValueError("prediction is non-positive at a valid ground-truth pixel")
    # Float depths carry ~1e-11 mm of representation noise; snapping the
    # error to a 1e-9 mm grid lets a decimal offset such as 0.1 m come out
    # as exactly 100 mm.
    err_mm = np.round(p * 1000.0 - g * 1000.0, 9)
    ierr = 1000.0 / p - 1000.0 / g
    return DepthMetrics(
        rmse_mm=float(np.sqrt(np.mean(err_mm ** 2))),
        mae_mm=float(np.mean(np.abs(err_mm))),
        irmse=float(np.sqrt(np.mean(ierr ** 2))),
        imae=float(np.mean(np.abs(ierr))),
    )


# --------------------------------------------------------------------------- #
# Boxes and IoU
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Box3D:
    """KITTI camera-frame box: ``y`` is the bottom face, height extends to ``y - h``."""

    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise ValueError(f"box dimensions must be positive: {(self.h, self.w, self.l)}")

    @classmethod
    def from_label(cls, rec: LabelRecord) -> "Box3D":
        h, w, l = rec.dims
        x, y, z = rec.location
        return cls(x, y, z, h, w, l, rec.rotation_y)

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l

    def bev_corners(self) -> np.ndarray:
        """Footprint corners ``(4, 2)`` as ``(x, z)``, counter-clockwise in the x-z plane."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = np.array([0.5, -0.5, -0.5, 0.5]) * self.l
        lz = np.array([0.5, 0.5, -0.5, -0.5]) * self.w
        x = self.x + c * lx + s * lz
        z = self.z - s * lx + c * lz
        return np.column_stack([x, z])

    def corners(self) -> np.ndarray:
        """All 8 corners ``(8, 3)`` in the camera frame."""
        bev = self.bev_corners()
        bottom = np.column_stack([bev[:, 0], np.full(4, self.y), bev[:, 1]])
        top = bottom.copy()
        top[:, 1] -= self.h
        return np.vstack([bottom, top])

    def contains(self, pts: np.ndarray, tol: float = 1e-6) -> np.ndarray:
        pts = np.atleast_2d(pts)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dz = pts[:, 0] - self.x, pts[:, 2] - self.z
        lx = c * dx - s * dz
        lz = s * dx + c * dz
        return ((np.abs(lx) <= self.l / 2 + tol) & (np.abs(lz) <= self.w / 2 + tol)
                & (pts[:, 1] <= self.y + tol) & (pts[:, 1] >= self.y - self.h - tol))


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: ``subject`` clipped by each edge of convex ``clip``."""
    if _signed_area(clip) < 0:
        clip = clip[::-1]
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    overlap_h = max(0.0, min(a.y, b.y) - max(a.y - a.h, b.y - b.h))
    inter = bev_intersection(a, b) * overlap_h
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


# --------------------------------------------------------------------------- #
# Difficulty and AP
# --------------------------------------------------------------------------- #

def assign_difficulty(rec: LabelRecord) -> str:
    for level in DIFFICULTIES:
        min_h, max_occ, max_trunc = DIFFICULTY_RULES[level]
        if rec.bbox_height >= min_h and rec.occlusion <= max_occ and rec.truncation <= max_trunc:
            return level
    return "ignored"


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    difficulty: str = "moderate"
    task: str = "3d"
    cls: str = "Car"
    dontcare_overlap: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "task", self.task.lower())
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must be in (0, 1]")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
        if self.task not in ("bev", "3d"):
            raise ValueError("task must be 'bev' or '3d'")


def _box2d_overlap_frac(det, dc) -> float:
    """Intersection of two 2D boxes as a fraction of the first box's area."""
    iw = min(det[2], dc[2]) - max(det[0], dc[0])
    ih = min(det[3], dc[3]) - max(det[1], dc[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    area = (det[2] - det[0]) * (det[3] - det[1])
    return iw * ih / area if area > 0 else 0.0


def _gt_status(rec: LabelRecord, cfg: EvalConfig) -> str:
    """'valid', 'ignore' (matches neither count), 'dontcare' or 'other'."""
    if rec.dont_care:
        return "dontcare"
    if rec.cls != cfg.cls:
        return "other"
    level = assign_difficulty(rec)
    if level != "ignored" and DIFFICULTIES.index(level) <= DIFFICULTIES.index(cfg.difficulty):
        return "valid"
    return "ignore"


def _score(det) -> float:
    return 1.0 if det.score is None else det.score


def match_frame(dets: list, gts: list, cfg: EvalConfig):
    """Label each detection of one frame as 1 (TP), 0 (FP) or None (ignored).

    Returns ``(labels, n_valid_gt)`` with labels aligned to ``dets``.
    """
    iou_fn = bev_iou if cfg.task == "bev" else iou_3d
    status = [_gt_status(g, cfg) for g in gts]
    boxes = [None if s in ("dontcare",) else Box3D.from_label(g) for g, s in zip(gts, status)]
    n_valid = sum(s == "valid" for s in status)
    order = sorted(range(len(dets)), key=lambda i: -_score(dets[i]))
    used = [False] * len(gts)
    labels = [None] * len(dets)
    for i in order:
        det = dets[i]
        if det.cls != cfg.cls:
            continue
        dbox = Box3D.from_label(det)
        best, best_iou = None, -1.0
        ignored_hit = False
        for j, g in enumerate(gts):
            if status[j] not in ("valid", "ignore") or used[j]:
                continue
            iou = iou_fn(dbox, boxes[j])
            if iou < cfg.iou_threshold:
                continue
            if status[j] == "valid":
                if iou > best_iou:
                    best, best_iou = j, iou
            else:
                ignored_hit = True
        if best is not None:
            used[best] = True
            labels[i] = 1
        elif ignored_hit:
            labels[i] = None
        elif any(status[j] == "dontcare" and
                 _box2d_overlap_frac(det.bbox2d, gts[j].bbox2d) >= cfg.dontcare_overlap
                 for j in range(len(gts))):
            labels[i] = None
        else:
            labels[i] = 0
    return labels, n_valid


def interpolated_ap(scores, labels, n_gt: int, n_points: int = 11) -> float:
    """Mean interpolated precision at ``n_points`` evenly spaced recall levels.

    Counts are integers, so the curve is kept in exact rationals: a recall of
    3/10 meets the 0.3 level without any float tolerance.
    """
    if n_gt <= 0:
        raise ValueError("n_gt must be positive")
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    curve, tp = [], 0
    for rank, i in enumerate(order, start=1):
        tp += labels[i]
        curve.append((Fraction(tp, n_gt), Fraction(tp, rank)))
    total = Fraction(0)
    for k in range(n_points):
        level = Fraction(k, n_points - 1)
        total += max((p for r, p in curve if r >= level), default=Fraction(0))
    return float(total / n_points)


def average_precision_11(dets_per_frame, gts_per_frame, cfg: EvalConfig) -> float:
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError("detections and ground truth cover a different number of frames")
    scores, labels, n_gt = [], [], 0
    for dets, gts in zip(dets_per_frame, gts_per_frame):
        lab, n_valid = match_frame(dets, gts, cfg)
        n_gt += n_valid
        for det, l in zip(dets, lab):
            if l is not None:
                scores.append(_score(det))
                labels.append(l)
    if n_gt == 0:
        raise ValueError(f"no {cfg.difficulty} '{cfg.cls}' ground truth objects: recall is undefined")
    return interpolated_ap(scores, labels, n_gt)
