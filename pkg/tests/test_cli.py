import io
import json
import re

import numpy as np
import pytest

from pseudolidar import cli, kitti_io
from pseudolidar.evaluation import Box3D
from pseudolidar.kitti_io import DepthMap, LabelRecord, RawScan


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(list(map(str, argv)), out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    code, _, err = run("synth-gen", "--scenes", 2, "--seed", 5, "--out", root, "--height", 32, "--width", 64)
    assert code == 0, err
    return root


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_gen_one_scene(tmp_path):
    code, out, _ = run("synth-gen", "--scenes", 1, "--out", tmp_path / "one", "--height", 32, "--width", 64)
    assert code == 0 and "1 scene" in out
    assert sorted(p.name for p in (tmp_path / "one" / "velodyne").iterdir()) == ["000000.bin"]


def test_synth_gen_same_seed_byte_identical(tmp_path, dataset):
    code, _, _ = run("synth-gen", "--scenes", 2, "--seed", 5, "--out", tmp_path / "again",
                     "--height", 32, "--width", 64)
    assert code == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(dataset)


def test_synth_gen_zero_is_usage_error(tmp_path):
    code, _, err = run("synth-gen", "--scenes", 0, "--out", tmp_path / "z")
    assert code == cli.EXIT_USAGE and err.startswith("error:")


def test_synth_gen_refuses_non_empty(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    code, _, err = run("synth-gen", "--scenes", 1, "--out", tmp_path, "--height", 32, "--width", 64)
    assert code == cli.EXIT_ERROR and "--force" in err
    code, _, _ = run("synth-gen", "--scenes", 1, "--out", tmp_path, "--height", 32, "--width", 64, "--force")
    assert code == 0


def test_unknown_flag_and_missing_subcommand():
    code, _, err = run("synth-gen", "--bogus")
    assert code == cli.EXIT_USAGE and err.startswith("error:")
    code, _, err = run()
    assert code == cli.EXIT_USAGE and err.startswith("error:")


def test_sparsify_full_is_identity(tmp_path, dataset):
    src = dataset / "velodyne" / "000000.bin"
    code, out, _ = run("sparsify", "--in", src, "--beams", 64, "--out", tmp_path / "full.bin")
    assert code == 0
    assert (tmp_path / "full.bin").read_bytes() == src.read_bytes()
    n = len(kitti_io.read_velodyne_bin(src))
    assert out.strip() == f"kept {n} of {n} points"


def test_sparsify_four_beams(tmp_path, dataset):
    code, out, _ = run("sparsify", "--in", dataset / "velodyne" / "000000.bin", "--out", tmp_path / "s4.bin")
    assert code == 0
    kept, total = map(int, re.match(r"kept (\d+) of (\d+) points", out).groups())
    assert 0 < kept < total and len(kitti_io.read_velodyne_bin(tmp_path / "s4.bin")) == kept


def test_sparsify_errors(tmp_path):
    code, _, err = run("sparsify", "--in", tmp_path / "missing.bin", "--out", tmp_path / "o.bin")
    assert code == cli.EXIT_ERROR and err.startswith("error:")
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 10)
    code, _, err = run("sparsify", "--in", bad, "--out", tmp_path / "o.bin")
    assert code == cli.EXIT_ERROR and "error:" in err


def test_pseudo_cloud_counts_and_round_trip(tmp_path, dataset):
    calib = kitti_io.read_calib(dataset / "calib" / "000000.txt")
    dm = DepthMap(np.full((32, 64), 12.0))
    kitti_io.write_depth_image(dm, tmp_path / "d.pgm")
    code, out, _ = run("pseudo-cloud", "--depth", tmp_path / "d.pgm", "--calib", dataset / "calib" / "000000.txt",
                       "--out", tmp_path / "c.ply", "--height-ceiling", 100, "--bin", tmp_path / "c.bin")
    assert code == 0 and out.strip() == "2048 pixels -> 2048 points"
    pts = kitti_io.read_ply(tmp_path / "c.ply").xyz
    # a constant-depth map is the plane Z_c = 12 in the camera frame
    from pseudolidar.geometry import lidar_to_cam
    cam = lidar_to_cam(pts, calib.extrinsic())
    np.testing.assert_allclose(cam[:, 2], 12.0, atol=1e-6)
    from pseudolidar.lidar_ops import render_sparse_depth
    back = render_sparse_depth(kitti_io.read_velodyne_bin(tmp_path / "c.bin"), calib, "left", (32, 64))
    assert back.valid.all() and np.abs(back.depth - 12.0).max() <= 1e-5


def test_pseudo_cloud_bad_calib(tmp_path):
    kitti_io.write_depth_image(DepthMap(np.full((4, 4), 5.0)), tmp_path / "d.pgm")
    (tmp_path / "calib.txt").write_text("P2: 1 2 3\n")
    code, _, err = run("pseudo-cloud", "--depth", tmp_path / "d.pgm", "--calib", tmp_path / "calib.txt",
                       "--out", tmp_path / "c.ply")
    assert code == cli.EXIT_ERROR and err.startswith("error:")


def test_eval_depth_zero_and_json(tmp_path):
    gt = DepthMap(np.full((4, 6), 10.0))
    kitti_io.write_depth_image(gt, tmp_path / "g.pgm")
    code, out, _ = run("eval-depth", "--pred", tmp_path / "g.pgm", "--gt", tmp_path / "g.pgm",
                       "--json", tmp_path / "m.json")
    assert code == 0
    report = json.loads((tmp_path / "m.json").read_text())
    assert report == {"rmse_mm": 0.0, "mae_mm": 0.0, "irmse": 0.0, "imae": 0.0}
    assert json.loads(out) == report


def test_eval_depth_empty_valid_set(tmp_path):
    kitti_io.write_depth_image(DepthMap.empty(4, 4), tmp_path / "g.pgm")
    kitti_io.write_depth_image(DepthMap(np.full((4, 4), 3.0)), tmp_path / "p.pgm")
    code, _, err = run("eval-depth", "--pred", tmp_path / "p.pgm", "--gt", tmp_path / "g.pgm")
    assert code == cli.EXIT_UNDEFINED and err.startswith("error:")


def _car(x, z, score=None):
    return LabelRecord("Car", 0.0, 0, 0.0, (100.0, 100.0, 200.0, 180.0), (1.5, 1.6, 3.9), (x, 1.65, z), 0.3, score)


def test_eval_detect_perfect_and_fixture(tmp_path):
    gts, dets = tmp_path / "gt", tmp_path / "det"
    gts.mkdir()
    dets.mkdir()
    frames = [[_car(0, 10)], [_car(4, 20)], [_car(-3, 30)]]
    for i, frame in enumerate(frames):
        kitti_io.write_labels(frame, gts / f"{i:06d}.txt")
        kitti_io.write_labels([_car(r.location[0], r.location[2], 1.0) for r in frame], dets / f"{i:06d}.txt")
    code, out, _ = run("eval-detect", "--dets", dets, "--gts", gts, "--iou", 0.7, "--task", "3d",
                       "--difficulty", "moderate", "--json", tmp_path / "ap.json")
    assert code == 0
    assert json.loads(out) == {"AP": 1.0, "difficulty": "moderate", "iou": 0.7, "task": "3d"}
    # 2 TPs and an FP between them, one missed object
    kitti_io.write_labels([_car(0, 10, 0.9)], dets / "000000.txt")
    kitti_io.write_labels([_car(4, 20, 0.4), _car(15, 50, 0.7)], dets / "000001.txt")
    kitti_io.write_labels([], dets / "000002.txt")
    code, out, _ = run("eval-detect", "--dets", dets, "--gts", gts, "--task", "bev")
    assert code == 0 and json.loads(out)["AP"] == 6 / 11


def test_eval_detect_no_gt(tmp_path):
    kitti_io.write_labels([], tmp_path / "g.txt")
    kitti_io.write_labels([_car(0, 10, 0.5)], tmp_path / "d.txt")
    code, _, err = run("eval-detect", "--dets", tmp_path / "d.txt", "--gts", tmp_path / "g.txt")
    assert code == cli.EXIT_UNDEFINED and err.startswith("error:")


def _polygons(svg):
    return [[tuple(map(float, p.split(","))) for p in m.split()]
            for m in re.findall(r'<polygon points="([^"]+)"', svg)]


def test_render_bev_box_corners_match_geometry(tmp_path):
    labels = [_car(2.0, 15.0), LabelRecord("Car", 0.0, 0, 0.0, (0, 0, 10, 10), (1.5, 2.0, 4.5), (-5.0, 1.65, 30.0), 1.1)]
    kitti_io.write_labels(labels, tmp_path / "l.txt")
    code, _, _ = run("render-bev", "--gt", tmp_path / "l.txt", "--out", tmp_path / "b.svg", "--scale", 8)
    assert code == 0
    svg = (tmp_path / "b.svg").read_text()
    assert svg.count("<circle") == 0              # empty cloud: boxes only
    polys = _polygons(svg)
    assert len(polys) == 2
    for rec, poly in zip(kitti_io.read_labels(tmp_path / "l.txt"), polys):
        corners = Box3D.from_label(rec).bev_corners()
        back = np.array([(px / 8 - 40.0, 80.0 - py / 8) for px, py in poly])
        np.testing.assert_allclose(back, corners, atol=1e-3)


def test_render_bev_deterministic_and_extension(tmp_path):
    kitti_io.write_ply(RawScan([[10.0, 1.0, 5.0, 1.0], [20.0, -2.0, 30.0, 1.0]]), tmp_path / "c.ply")
    for name in ("a.svg", "b.svg"):
        assert run("render-bev", "--cloud", tmp_path / "c.ply", "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert (tmp_path / "a.svg").read_text().count("<circle") == 2
    code, _, err = run("render-bev", "--cloud", tmp_path / "c.ply", "--out", tmp_path / "a.png")
    assert code == cli.EXIT_USAGE and "extension" in err
    code, _, err = run("render-bev", "--cloud", tmp_path / "c.xyz", "--out", tmp_path / "a.svg")
    assert code == cli.EXIT_USAGE


def test_train_toy_zero_steps_is_init(tmp_path, dataset):
    from pseudolidar import fusion_net
    code, out, _ = run("train-toy", "--data", dataset, "--steps", 0, "--seed", 3, "--out", tmp_path / "c0")
    assert code == 0 and out.startswith("final loss")
    init = fusion_net.NetParams.init(fusion_net.Architecture(), 3)
    assert (tmp_path / "c0").read_bytes() == init.to_bytes()


def test_train_toy_trace_repeats_and_predict(tmp_path, dataset):
    traces = []
    for name in ("a", "b"):
        code, out, err = run("train-toy", "--data", dataset, "--steps", 2, "--out", tmp_path / name)
        assert code == 0, err
        traces.append(out)
    assert traces[0] == traces[1]
    assert re.findall(r"^step (\d+) loss", traces[0], re.M) == ["0", "1"]
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    code, _, _ = run("predict-depth", "--sample", dataset, "--frame", 1, "--checkpoint", tmp_path / "a",
                     "--out", tmp_path / "p.pgm")
    assert code == 0
    pred = kitti_io.read_depth_image(tmp_path / "p.pgm")
    assert pred.shape == (32, 64) and pred.valid.all()
    # 1/256 m quantisation of the stored map
    assert pred.depth.min() >= 1.0 - 1 / 512 and pred.depth.max() <= 80.0 + 1 / 512


def test_train_toy_empty_dataset(tmp_path):
    (tmp_path / "velodyne").mkdir()
    code, _, err = run("train-toy", "--data", tmp_path, "--steps", 1, "--out", tmp_path / "c")
    assert code == cli.EXIT_ERROR and err.startswith("error:")


def test_predict_depth_bad_checkpoint(tmp_path, dataset):
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    code, _, err = run("predict-depth", "--sample", dataset, "--checkpoint", tmp_path / "junk.ckpt",
                       "--out", tmp_path / "p.pgm")
    assert code == cli.EXIT_ERROR and "checkpoint" in err


def test_config_file_and_precedence(tmp_path, dataset):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sparsify settings\nbeams = 64\nout = %s\n" % (tmp_path / "from_cfg.bin"))
    src = dataset / "velodyne" / "000000.bin"
    code, out, _ = run("--config", cfg, "sparsify", "--in", src)
    assert code == 0 and (tmp_path / "from_cfg.bin").read_bytes() == src.read_bytes()
    code, out, _ = run("--config", cfg, "sparsify", "--in", src, "--beams", 4)
    kept, total = map(int, re.match(r"kept (\d+) of (\d+)", out).groups())
    assert kept < total
    cfg.write_text("frobnicate = 1\n")
    code, _, err = run("--config", cfg, "sparsify", "--in", src)
    assert code == cli.EXIT_USAGE and "frobnicate" in err


def test_thread_env(monkeypatch, tmp_path, dataset):
    monkeypatch.setenv("PSEUDOLIDAR_THREADS", "1")
    code, _, _ = run("sparsify", "--in", dataset / "velodyne" / "000000.bin", "--out", tmp_path / "t.bin")
    assert code == 0
    monkeypatch.setenv("PSEUDOLIDAR_THREADS", "many")
    code, _, err = run("sparsify", "--in", dataset / "velodyne" / "000000.bin", "--out", tmp_path / "t.bin")
    assert code == cli.EXIT_USAGE and "PSEUDOLIDAR_THREADS" in err
