"""Readers and writers for the KITTI object / depth-completion file formats.

Covers velodyne ``.bin`` scans, ``calib/*.txt``, ``label_2/*.txt``,
16-bit depth images (PGM ``P5``, optionally PNG), 8-bit PPM/PGM images
and ASCII PLY point clouds.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError
from .geometry import Intrinsics, RigidTransform, check_rotation, nearest_rotation

DEPTH_SCALE = 256.0
# Tolerance for the velodyne->camera rotation as printed in KITTI calib files
# (6-7 significant digits); anything this close is snapped onto SO(3).
TR_SNAP_TOL = 1e-3


# --------------------------------------------------------------------------- #
# Point clouds
# --------------------------------------------------------------------------- #

@dataclass
class RawScan:
    """N LiDAR points ``(x, y, z, reflectance)`` in the LiDAR frame."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise FormatError(f"scan must be (N, 4), got {pts.shape}")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.points[:, 3]


def read_velodyne_bin(path) -> RawScan:
    raw = Path(path).read_bytes()
    return decode_velodyne(raw)


def decode_velodyne(raw: bytes) -> RawScan:
    if len(raw) % 16:
        bad = len(raw) - len(raw) % 16
        raise FormatError(
            f"velodyne buffer of {len(raw)} bytes is not a multiple of 16; "
            f"truncated record at byte offset {bad}")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.isfinite(pts).all(axis=1)
    if not finite.all():
        first = int(np.flatnonzero(~finite)[0])
        raise FormatError(f"non-finite value in point {first} (byte offset {first * 16})")
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return RawScan(pts)


def encode_velodyne(scan: RawScan) -> bytes:
    return np.ascontiguousarray(scan.points, dtype="<f4").tobytes()


def write_velodyne_bin(scan: RawScan, path) -> None:
    Path(path).write_bytes(encode_velodyne(scan))


def write_ply(points, path) -> None:
    """ASCII PLY with ``x y z reflectance`` vertex properties."""
    pts = points.points if hasattr(points, "points") else points
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property float reflectance",
        "end_header",
    ]
    lines.extend("%.9g %.9g %.9g %.9g" % tuple(p) for p in pts)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path) -> RawScan:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    head, sep, body = text.partition("end_header\n")
    if not sep or not head.startswith("ply"):
        raise FormatError(f"{path}: not an ASCII PLY file")
    if "format ascii" not in head:
        raise FormatError(f"{path}: only ASCII PLY is supported")
    m = re.search(r"element vertex (\d+)", head)
    if m is None:
        raise FormatError(f"{path}: missing vertex element")
    n = int(m.group(1))
    props = re.findall(r"property \w+ (\w+)", head)
    rows = [ln.split() for ln in body.splitlines() if ln.strip()]
    if len(rows) != n:
        raise FormatError(f"{path}: header declares {n} vertices, body has {len(rows)}")
    arr = np.array(rows, dtype=np.float64).reshape(n, len(props))
    cols = [props.index(k) for k in ("x", "y", "z")]
    refl = arr[:, props.index("reflectance")] if "reflectance" in props else np.ones(n)
    return RawScan(np.column_stack([arr[:, cols], refl]))


# --------------------------------------------------------------------------- #
# Calibration
# --------------------------------------------------------------------------- #

_CALIB_ARITY = {"P2": 12, "P3": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


@dataclass(frozen=True)
class CalibSet:
    P_left: np.ndarray
    P_right: np.ndarray
    R_rect: np.ndarray
    T_velo_to_cam: np.ndarray

    def __post_init__(self):
        for name, shape in (("P_left", (3, 4)), ("P_right", (3, 4)),
                            ("R_rect", (3, 3)), ("T_velo_to_cam", (3, 4))):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(shape)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        Intrinsics(self.f_u, self.f_v, self.c_u, self.c_v)
        if not self.baseline > 0:
            raise ParseError(f"derived stereo baseline must be positive, got {self.baseline}")
        check_rotation(self.R_rect)

    @property
    def f_u(self) -> float:
        return float(self.P_left[0, 0])

    @property
    def f_v(self) -> float:
        return float(self.P_left[1, 1])

    @property
    def c_u(self) -> float:
        return float(self.P_left[0, 2])

    @property
    def c_v(self) -> float:
        return float(self.P_left[1, 2])

    @property
    def baseline(self) -> float:
        return float((self.P_left[0, 3] - self.P_right[0, 3]) / self.P_left[0, 0])

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.f_u, self.f_v, self.c_u, self.c_v)

    def extrinsic(self, side: str = "left") -> RigidTransform:
        """LiDAR -> rectified camera frame of the given stereo camera.

        The camera frame is centred on that camera, so projection with
        ``intrinsics`` alone reproduces ``P @ R_rect @ Tr_velo_to_cam``.
        """
        P = self._P(side)
        K = self.intrinsics.matrix
        offset = np.linalg.solve(K, P[:, 3])
        R = self.R_rect @ self.T_velo_to_cam[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > TR_SNAP_TOL:
            raise ParseError("Tr_velo_to_cam: rotation block is not orthonormal")
        t = self.R_rect @ self.T_velo_to_cam[:, 3] + offset
        return RigidTransform(nearest_rotation(R), t)

    def _P(self, side: str) -> np.ndarray:
        if side == "left":
            return self.P_left
        if side == "right":
            return self.P_right
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")

    def to_text(self) -> str:
        def row(key, arr):
            return key + ": " + " ".join("%.12e" % v for v in np.ravel(arr))
        P0 = self.P_left.copy()
        P0[:, 3] = 0.0
        return "\n".join([
            row("P0", P0), row("P1", P0),
            row("P2", self.P_left), row("P3", self.P_right),
            row("R0_rect", self.R_rect),
            row("Tr_velo_to_cam", self.T_velo_to_cam),
            row("Tr_imu_to_velo", np.hstack([np.eye(3), np.zeros((3, 1))])),
        ]) + "\n"


def parse_calib(text: str) -> CalibSet:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        try:
            values[key] = [float(tok) for tok in rest.split()]
        except ValueError as exc:
            raise ParseError(f"{key}: non-numeric entry on line {lineno}") from exc
    for key, n in _CALIB_ARITY.items():
        if key not in values:
            raise ParseError(f"{key}: missing from calibration")
        if len(values[key]) != n:
            raise ParseError(f"{key}: expected {n} numbers, got {len(values[key])}")
    return CalibSet(
        P_left=np.reshape(values["P2"], (3, 4)),
        P_right=np.reshape(values["P3"], (3, 4)),
        R_rect=np.reshape(values["R0_rect"], (3, 3)),
        T_velo_to_cam=np.reshape(values["Tr_velo_to_cam"], (3, 4)),
    )


def read_calib(path) -> CalibSet:
    return parse_calib(Path(path).read_text())


# --------------------------------------------------------------------------- #
# Labels
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class LabelRecord:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple
    dims: tuple          # (h, w, l), metres
    location: tuple      # (x, y, z) camera frame, y at the box bottom
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self) -> bool:
        return self.cls == "DontCare"

    @property
    def bbox_height(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    def to_line(self) -> str:
        fields = [self.cls, "%.2f" % self.truncation, "%d" % self.occlusion, "%.2f" % self.alpha]
        fields += ["%.2f" % v for v in self.bbox2d]
        fields += ["%.2f" % v for v in self.dims]
        fields += ["%.2f" % v for v in self.location]
        fields.append("%.2f" % self.rotation_y)
        if self.score is not None:
            fields.append("%.4f" % self.score)
        return " ".join(fields)


def parse_labels(text: str) -> list[LabelRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) not in (15, 16):
            raise ParseError(f"line {lineno}: expected 15 or 16 fields, got {len(tok)}")
        try:
            num = [float(t) for t in tok[1:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: non-numeric field") from exc
        rec = LabelRecord(
            cls=tok[0],
            truncation=num[0],
            occlusion=int(num[1]),
            alpha=num[2],
            bbox2d=tuple(num[3:7]),
            dims=tuple(num[7:10]),
            location=tuple(num[10:13]),
            rotation_y=num[13],
            score=num[14] if len(num) == 15 else None,
        )
        if not rec.dont_care:
            x1, y1, x2, y2 = rec.bbox2d
            if not (x1 < x2 and y1 < y2):
                raise ParseError(f"line {lineno}: degenerate 2D box {rec.bbox2d}")
            if min(rec.dims) <= 0:
                raise ParseError(f"line {lineno}: non-positive dimensions {rec.dims}")
        records.append(rec)
    return records


def read_labels(path) -> list[LabelRecord]:
    return parse_labels(Path(path).read_text())


def write_labels(records, path) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in records))


# --------------------------------------------------------------------------- #
# Depth maps and images
# --------------------------------------------------------------------------- #

@dataclass
class DepthMap:
    """H x W metric depth with an explicit validity mask."""

    depth: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise FormatError(f"depth map must be 2-D, got {self.depth.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.depth) & (self.depth > 0)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.depth.shape:
            raise FormatError("validity mask shape differs from depth shape")

    @property
    def shape(self):
        return self.depth.shape

    @property
    def occupancy(self) -> float:
        return float(self.valid.mean()) if self.valid.size else 0.0

    @classmethod
    def empty(cls, height: int, width: int) -> "DepthMap":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))


def depth_to_samples(dm: DepthMap) -> np.ndarray:
    d = np.where(dm.valid, dm.depth, 0.0)
    if np.any(d >= 65535.5 / DEPTH_SCALE):
        raise FormatError("depth exceeds the 16-bit range (max 255.99 m)")
    s = np.floor(d * DEPTH_SCALE + 0.5).astype(np.uint16)
    # a valid depth below 1/512 m would round to the invalid sentinel
    s[dm.valid & (s == 0)] = 1
    return s


def samples_to_depth(samples: np.ndarray) -> DepthMap:
    samples = np.asarray(samples)
    return DepthMap(samples.astype(np.float64) / DEPTH_SCALE, samples > 0)


def _pnm_header(raw: bytes, magic: bytes):
    """Parse a binary PNM header; returns (width, height, maxval, data offset)."""
    if raw[:2] != magic:
        raise FormatError(f"expected {magic.decode()} image, got magic {raw[:2]!r}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(int(raw[start:pos]))
    return tokens[0], tokens[1], tokens[2], pos + 1


def encode_pgm16(samples: np.ndarray) -> bytes:
    h, w = samples.shape
    return b"P5\n%d %d\n65535\n" % (w, h) + np.ascontiguousarray(samples, dtype=">u2").tobytes()


def decode_pgm16(raw: bytes) -> np.ndarray:
    w, h, maxval, off = _pnm_header(raw, b"P5")
    if maxval < 256:
        raise FormatError(f"8-bit PGM (maxval {maxval}) cannot hold 16-bit depth")
    if maxval != 65535:
        raise FormatError(f"16-bit depth PGM must have maxval 65535, got {maxval}")
    need = 2 * w * h
    if len(raw) - off < need:
        raise FormatError(f"PGM body holds {len(raw) - off} bytes, expected {need}")
    return np.frombuffer(raw, dtype=">u2", count=w * h, offset=off).reshape(h, w).astype(np.uint16)


def write_depth_image(dm: DepthMap, path) -> None:
    samples = depth_to_samples(dm)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        Image.fromarray(samples).save(path)
    else:
        path.write_bytes(encode_pgm16(samples))


def read_depth_image(path) -> DepthMap:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        with Image.open(path) as im:
            if im.mode not in ("I;16", "I;16B", "I"):
                raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode}")
            samples = np.array(im).astype(np.uint16)
        return samples_to_depth(samples)
    return samples_to_depth(decode_pgm16(path.read_bytes()))


def write_ppm(image: np.ndarray, path) -> None:
    """Write an H x W x 3 float image in [0, 1] as 8-bit binary PPM."""
    img = np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, maxval, off = _pnm_header(raw, b"P6")
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM is supported, got maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def frame_name(index: int) -> str:
    return "%06d" % index


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
