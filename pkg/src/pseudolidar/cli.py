"""``pseudolidar`` command line.

Every flag may also come from a ``--config`` file of ``key=value`` lines
(``#`` starts a comment, keys use the long flag name with ``-`` or ``_``).
Precedence: command line, then config file, then built-in defaults.

Exit status: 0 on success, 1 on I/O, format or domain errors, 2 on usage
errors, 3 when a metric is undefined (no valid ground truth).
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import fusion_net, kitti_io, synth
from .errors import PseudoLidarError
from .evaluation import Box3D, EvalConfig, average_precision_11, depth_metrics
from .lidar_ops import BeamConfig, sparsify
from .pseudo_cloud import depth_to_cloud, postprocess, subsample_to_beams

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_UNDEFINED = 3


class UsageError(Exception):
    pass


class UndefinedMetric(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- #
# helpers
# --------------------------------------------------------------------------- #

def _emit(report: dict, path) -> str:
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if path:
        Path(path).write_text(text)
    return text


def _beam_config(n: int) -> BeamConfig:
    if n < 1:
        raise UsageError("--beams must be at least 1")
    return BeamConfig.beams(n)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _suffix(path, allowed, what):
    ext = Path(path).suffix.lower()
    if ext not in allowed:
        raise UsageError(f"unsupported {what} extension {ext or '(none)'!r}; expected one of {sorted(allowed)}")
    return ext


def _read_cloud(path) -> np.ndarray:
    ext = _suffix(path, {".ply", ".bin"}, "point cloud")
    if ext == ".ply":
        return kitti_io.read_ply(path).points
    return kitti_io.read_velodyne_bin(path).points


def _label_sets(path):
    """``{frame: [LabelRecord]}`` from a label file or a directory of them."""
    p = Path(path)
    if p.is_dir():
        return {f.stem: kitti_io.read_labels(f) for f in sorted(p.glob("*.txt"))}
    return {p.stem: kitti_io.read_labels(p)}


def _thread_limit():
    raw = os.environ.get("PSEUDOLIDAR_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PSEUDOLIDAR_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("PSEUDOLIDAR_THREADS must be >= 0")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def cmd_synth_gen(args, out):
    _require(args, "scenes", "out")
    if args.scenes < 1:
        raise UsageError("synth-gen: --scenes must be at least 1")
    root = Path(args.out)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise PseudoLidarError(f"output directory {root} is not empty (use --force to overwrite)")
        for sub in synth.SUBDIRS:
            shutil.rmtree(root / sub, ignore_errors=True)
    samples = synth.make_dataset(args.scenes, seed=args.seed, size=(args.height, args.width),
                                 checker=args.checker)
    synth.export_dataset(samples, root)
    out.write(f"wrote {len(samples)} scene(s) to {root}\n")


def cmd_sparsify(args, out):
    _require(args, "in_path", "out")
    scan = kitti_io.read_velodyne_bin(args.in_path)
    kept = sparsify(scan, _beam_config(args.beams))
    kitti_io.write_velodyne_bin(kept, args.out)
    out.write(f"kept {len(kept)} of {len(scan)} points\n")


def _frame(root: Path, name):
    frames = synth.list_frames(root)
    if not frames:
        raise PseudoLidarError(f"no frames under {root / 'velodyne'}")
    if name is None:
        return frames[0]
    name = kitti_io.frame_name(int(name)) if str(name).isdigit() else str(name)
    if name not in frames:
        raise PseudoLidarError(f"frame {name} not found under {root}")
    return name


def cmd_predict_depth(args, out):
    _require(args, "sample", "checkpoint", "out")
    _suffix(args.out, {".pgm", ".png"}, "depth image")
    root = Path(args.sample)
    sample = synth.load_sample(root, _frame(root, args.frame), _beam_config(args.beams))
    params = fusion_net.NetParams.load(args.checkpoint)
    h, w = sample.image_l.shape[:2]
    step = params.arch.stride_total
    if h % step or w % step:
        raise PseudoLidarError(
            f"checkpoint architecture needs image sides divisible by {step}, got {h}x{w}")
    pred, _ = fusion_net.forward_full(sample.image_l, sample.image_r, sample.sparse_l, sample.sparse_r,
                                      sample.calib.f_u, sample.calib.baseline, params)
    kitti_io.write_depth_image(pred, args.out)
    out.write(f"wrote {w}x{h} depth to {args.out}\n")


def cmd_pseudo_cloud(args, out):
    _require(args, "depth", "calib", "out")
    _suffix(args.out, {".ply"}, "point cloud")
    depth = kitti_io.read_depth_image(args.depth)
    calib = kitti_io.read_calib(args.calib)
    cloud = depth_to_cloud(depth, calib)
    n_raw = len(cloud)
    cloud = postprocess(cloud, args.height_ceiling)
    if args.subsample:
        cloud = subsample_to_beams(cloud, BeamConfig.full())
    kitti_io.write_ply(cloud.to_scan(), args.out)
    if args.bin:
        kitti_io.write_velodyne_bin(cloud.to_scan(), args.bin)
    out.write(f"{n_raw} pixels -> {len(cloud)} points\n")


def cmd_eval_depth(args, out):
    _require(args, "pred", "gt")
    pred = kitti_io.read_depth_image(args.pred)
    gt = kitti_io.read_depth_image(args.gt)
    try:
        metrics = depth_metrics(pred, gt)
    except ValueError as exc:
        if "no valid" in str(exc):
            raise UndefinedMetric(str(exc)) from None
        raise
    out.write(_emit(metrics.to_dict(), args.json))


def cmd_eval_detect(args, out):
    _require(args, "dets", "gts")
    cfg = EvalConfig(args.iou, args.difficulty, args.task)
    gts = _label_sets(args.gts)
    dets = _label_sets(args.dets)
    if not Path(args.gts).is_dir() and not Path(args.dets).is_dir():
        # two single files describe the same frame whatever their names
        dets = {next(iter(gts)): next(iter(dets.values()))}
    unknown = sorted(set(dets) - set(gts))
    if unknown:
        raise PseudoLidarError(f"detections for frames without ground truth: {', '.join(unknown)}")
    frames = sorted(gts)
    try:
        ap = average_precision_11([dets.get(f, []) for f in frames], [gts[f] for f in frames], cfg)
    except ValueError as exc:
        raise UndefinedMetric(str(exc)) from None
    report = {"task": cfg.task, "iou": cfg.iou_threshold, "difficulty": cfg.difficulty, "AP": ap}
    out.write(_emit(report, args.json))


def bev_svg(points_xz: np.ndarray, boxes, x_range=(-40.0, 40.0), z_range=(0.0, 80.0),
            scale: float = 10.0) -> str:
    """Top-down SVG: camera x to the right, forward z up, ``scale`` px per metre."""
    x0, x1 = x_range
    z0, z1 = z_range
    width, height = (x1 - x0) * scale, (z1 - z0) * scale

    def to_px(x, z):
        return (x - x0) * scale, (z1 - z) * scale

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.3f} {height:.3f}" data-scale="{scale:.6g}" '
        f'data-x0="{x0:.6g}" data-z1="{z1:.6g}">',
        f'<rect x="0" y="0" width="{width:.3f}" height="{height:.3f}" fill="#ffffff"/>',
        '<g id="points" fill="#1f4e79">',
    ]
    if len(points_xz):
        keep = ((points_xz[:, 0] >= x0) & (points_xz[:, 0] <= x1)
                & (points_xz[:, 1] >= z0) & (points_xz[:, 1] <= z1))
        for x, z in points_xz[keep]:
            px, py = to_px(x, z)
            lines.append(f'<circle cx="{px:.3f}" cy="{py:.3f}" r="1"/>')
    lines.append("</g>")
    lines.append('<g id="boxes" fill="none" stroke="#c00000" stroke-width="2">')
    for box in boxes:
        pts = " ".join("{:.3f},{:.3f}".format(*to_px(x, z)) for x, z in box.bev_corners())
        lines.append(f'<polygon points="{pts}"/>')
    lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_render_bev(args, out):
    _require(args, "out")
    _suffix(args.out, {".svg"}, "render")
    pts = np.zeros((0, 3))
    if args.cloud:
        pts = _read_cloud(args.cloud)[:, :3]
        if args.calib:
            calib = kitti_io.read_calib(args.calib)
            from .geometry import lidar_to_cam
            pts = lidar_to_cam(pts, calib.extrinsic("left")) if len(pts) else pts
    boxes = []
    if args.gt:
        boxes = [Box3D.from_label(r) for r in kitti_io.read_labels(args.gt) if not r.dont_care]
    svg = bev_svg(pts[:, [0, 2]], boxes, tuple(args.x_range), tuple(args.z_range), args.scale)
    Path(args.out).write_text(svg)
    out.write(f"rendered {len(pts)} points and {len(boxes)} boxes to {args.out}\n")


def cmd_train_toy(args, out):
    _require(args, "data", "out")
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    samples = synth.load_dataset(args.data, _beam_config(args.beams))
    if not samples:
        raise PseudoLidarError(f"no training samples under {args.data}")
    arch = fusion_net.Architecture()
    params = fusion_net.NetParams.init(arch, args.seed)
    adam = fusion_net.Adam(lr=args.lr) if args.optimizer == "adam" else None
    for step in range(args.steps):
        if adam is None:
            params, loss = fusion_net.train_step(samples, params, args.lr, zero_lidar=args.no_lidar)
        else:
            loss, grads = fusion_net.batch_gradient(samples, params, zero_lidar=args.no_lidar)
            params = adam.step(params, grads)
        out.write(f"step {step} loss {loss:.9g}\n")
        out.flush()
    final = fusion_net.mean_loss(samples, params, zero_lidar=args.no_lidar)
    out.write(f"final loss {final:.9g}\n")
    params.save(args.out)


# --------------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------------- #

def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pseudolidar", description="Pseudo-LiDAR depth, cloud and evaluation tools.")
    p.add_argument("--config", help="key=value file supplying defaults for any flag")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="write a synthetic KITTI-layout dataset")
    s.add_argument("--scenes", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--checker", type=float, default=0.35, help="texture contrast in [0, 1)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("sparsify", help="keep a subset of LiDAR beams")
    s.add_argument("--in", dest="in_path")
    s.add_argument("--beams", type=int, default=4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sparsify)

    s = sub.add_parser("predict-depth", help="run the fusion network on one frame")
    s.add_argument("--sample", help="dataset root in KITTI layout")
    s.add_argument("--frame", help="frame name or index (default: first)")
    s.add_argument("--checkpoint")
    s.add_argument("--beams", type=int, default=4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict_depth)

    s = sub.add_parser("pseudo-cloud", help="back-project a depth map into a LiDAR-frame cloud")
    s.add_argument("--depth")
    s.add_argument("--calib")
    s.add_argument("--out")
    s.add_argument("--bin", help="also write a velodyne .bin")
    s.add_argument("--subsample", action="store_true", help="keep one point per 64-line sensor cell")
    s.add_argument("--height-ceiling", type=float, default=1.0, help="drop points above this z (m)")
    s.set_defaults(func=cmd_pseudo_cloud)

    s = sub.add_parser("eval-depth", help="RMSE / MAE / iRMSE / iMAE")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("eval-detect", help="11-point AP for BEV or 3D boxes")
    s.add_argument("--dets")
    s.add_argument("--gts")
    s.add_argument("--iou", type=float, default=0.7)
    s.add_argument("--task", choices=["bev", "3d"], default="3d")
    s.add_argument("--difficulty", choices=["easy", "moderate", "hard"], default="moderate")
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval_detect)

    s = sub.add_parser("render-bev", help="top-down SVG of a cloud and label boxes")
    s.add_argument("--cloud")
    s.add_argument("--gt")
    s.add_argument("--calib", help="map a LiDAR-frame cloud into the camera frame")
    s.add_argument("--out")
    s.add_argument("--x-range", type=float, nargs=2, default=[-40.0, 40.0])
    s.add_argument("--z-range", type=float, nargs=2, default=[0.0, 80.0])
    s.add_argument("--scale", type=float, default=10.0, help="pixels per metre")
    s.set_defaults(func=cmd_render_bev)

    s = sub.add_parser("train-toy", help="deterministic training-sanity run")
    s.add_argument("--data")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--beams", type=int, default=4)
    s.add_argument("--optimizer", choices=["gd", "adam"], default="gd")
    s.add_argument("--no-lidar", action="store_true", help="zero the LiDAR tower input")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_toy)
    return p


def read_config(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _apply_config(parser, argv, config: dict):
    """Re-parse ``argv`` with ``config`` installed as subcommand defaults."""
    args = parser.parse_args(argv)
    if not config or args.command is None:
        return args
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions}
    if "in" in config:
        config["in_path"] = config.pop("in")
    defaults = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None or key == "help":
            raise UsageError(f"config key {key!r} is not an option of {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _bool(value)
        elif action.nargs not in (None, "?"):
            defaults[key] = [action.type(v) if action.type else v for v in value.split()]
        else:
            defaults[key] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(parser, argv, read_config(args.config))
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        with _thread_limit():
            args.func(args, out)
    except UsageError as exc:
        err.write(f"error: {exc}\n")
        return EXIT_USAGE
    except UndefinedMetric as exc:
        err.write(f"error: {exc}\n")
        return EXIT_UNDEFINED
    except (PseudoLidarError, OSError, ValueError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_ERROR
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
