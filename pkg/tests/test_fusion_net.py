import numpy as np
import pytest

from pseudolidar import fusion_net as fn
from pseudolidar import nn
from pseudolidar import synth
from pseudolidar.cost_volume import smooth_l1_loss
from pseudolidar.errors import FormatError, ShapeError
from pseudolidar.kitti_io import DepthMap

TOY = fn.Architecture(c0=2, feat=4, max_disp=4, k_depth=12)


def toy_inputs(rng, h=16, w=16):
    imgs = rng.uniform(0, 1, (2, h, w, 3))
    sparse = []
    for _ in range(2):
        valid = rng.random((h, w)) < 0.2
        sparse.append(DepthMap(np.where(valid, rng.uniform(2, 60, (h, w)), 0.0), valid))
    gt = DepthMap(rng.uniform(5, 60, (h, w)), rng.random((h, w)) < 0.8)
    return imgs[0], imgs[1], sparse[0], sparse[1], gt


def chain_loss(params, I_l, I_r, S_l, S_r, gt):
    pred, state = fn.forward_full(I_l, I_r, S_l, S_r, 50.0, 0.5, params)
    loss, dpred = smooth_l1_loss(pred.depth, gt.depth, gt.valid)
    return loss, dpred, state


def test_output_shape_contract():
    params = fn.NetParams.init(fn.Architecture(), 0)
    rng = np.random.default_rng(0)
    feat = fn.extract_features(rng.uniform(0, 1, (64, 64, 3)), DepthMap.empty(64, 64), params)
    assert feat.shape == (32, 16, 16)


@pytest.mark.parametrize("hw", [(16, 32), (48, 16)])
def test_output_is_quarter_resolution(hw):
    params = fn.NetParams.init(TOY, 1)
    feat = fn.extract_features(np.zeros(hw + (3,)), DepthMap.empty(*hw), params)
    assert feat.shape == (4, hw[0] // 4, hw[1] // 4)


def test_indivisible_input():
    params = fn.NetParams.init(TOY, 0)
    with pytest.raises(ShapeError):
        fn.extract_features(np.zeros((20, 16, 3)), DepthMap.empty(20, 16), params)


def test_architecture_rejects_unreachable_resolution():
    with pytest.raises(ValueError):
        fn.Architecture(n_stages=4, n_up=1, downsample=1)


def test_swap_symmetry_bit_exact():
    params = fn.NetParams.init(fn.Architecture(), 3)
    I_l, I_r, S_l, S_r, _ = toy_inputs(np.random.default_rng(3), 32, 32)
    fl, fr = fn.extract_features(I_l, S_l, params), fn.extract_features(I_r, S_r, params)
    gl, gr = fn.extract_features(I_r, S_r, params), fn.extract_features(I_l, S_l, params)
    np.testing.assert_array_equal(fl, gr)
    np.testing.assert_array_equal(fr, gl)


@pytest.mark.parametrize("seed", range(3))
def test_zero_lidar_changes_output(seed):
    params = fn.NetParams.init(TOY, seed)
    I_l, _, S_l, _, _ = toy_inputs(np.random.default_rng(seed))
    a = fn.extract_features(I_l, S_l, params)
    b = fn.extract_features(I_l, DepthMap.empty(16, 16), params)
    assert np.linalg.norm(a - b) > 0


def test_forward_range_and_shape():
    params = fn.NetParams.init(TOY, 4)
    I_l, I_r, S_l, S_r, _ = toy_inputs(np.random.default_rng(4), 16, 32)
    pred, _ = fn.forward_full(I_l, I_r, S_l, S_r, 50.0, 0.5, params)
    assert pred.shape == (16, 32)
    assert pred.depth.min() >= 1.0 and pred.depth.max() <= 80.0


def test_identical_views_prefer_zero_disparity():
    arch = fn.Architecture(c0=2, feat=4, max_disp=4, k_depth=12, aggregation=False)
    params = fn.NetParams.init(arch, 5)
    I, _, S, _, _ = toy_inputs(np.random.default_rng(5), 32, 32)
    feat = fn.extract_features(I, S, params)
    from pseudolidar.cost_volume import build_dicv
    cv = build_dicv(feat, feat, arch.max_disp)
    assert np.all(cv.cost.argmin(axis=0)[:, arch.max_disp:] == 0)


# --- full-chain gradient check ---------------------------------------------

class KinkRecorder:
    """Records every ReLU mask and the smooth-L1 branch of a forward pass.

    Central differences are only an oracle where the loss is smooth over the
    whole stencil, so probes whose +h and -h passes differ here are redrawn.
    """

    def __init__(self, monkeypatch):
        self.masks = []
        real = nn.relu

        def relu(x):
            out, mask = real(x)
            self.masks.append(mask)
            return out, mask

        monkeypatch.setattr(nn, "relu", relu)

    def run(self, f):
        self.masks = []
        loss, dpred, state = f()
        # |x| < 1 exactly where the loss gradient is below 1/N in magnitude
        quad = np.abs(dpred) * np.count_nonzero(dpred) < 1.0
        return loss, [m.copy() for m in self.masks] + [quad]


def _check_instance(seed, monkeypatch, n_params=12, n_pixels=4, h=1e-4):
    rng = np.random.default_rng(seed)
    params = fn.NetParams.init(TOY, seed)
    # Zero biases put dead ReLU regions exactly on the kink.
    for name, arr in params.arrays.items():
        if name.endswith(".b"):
            params.arrays[name] = rng.normal(0, 0.1, arr.shape)
    # non-zero aggregation weights so that path is exercised too
    params.arrays["agg.w"] = rng.normal(0, 0.5, params["agg.w"].shape)
    params.arrays["agg.log_scale"] = rng.normal(0, 0.3, (1,))
    I_l, I_r, S_l, S_r, gt = toy_inputs(rng)
    rec = KinkRecorder(monkeypatch)
    _, dpred, state = chain_loss(params, I_l, I_r, S_l, S_r, gt)
    grads, (dimg_l, dimg_r) = fn.backward_full(dpred, params, state)

    def evaluate():
        return rec.run(lambda: chain_loss(params, I_l, I_r, S_l, S_r, gt))

    names = sorted(params.arrays)

    def draw(kind):
        if kind == "param":
            name = names[rng.integers(len(names))]
            arr = params.arrays[name]
            return arr, tuple(int(rng.integers(0, s)) for s in arr.shape), grads[name]
        img, dimg = ((I_l, dimg_l), (I_r, dimg_r))[rng.integers(2)]
        return img, tuple(int(rng.integers(0, s)) for s in img.shape), dimg

    worst, checked, redrawn = 0.0, 0, 0
    for kind in ["param"] * n_params + ["pixel"] * n_pixels:
        while True:
            arr, idx, g = draw(kind)
            old = arr[idx]
            arr[idx] = old + h
            up, kinks_up = evaluate()
            arr[idx] = old - h
            dn, kinks_dn = evaluate()
            arr[idx] = old
            if all(np.array_equal(a, b) for a, b in zip(kinks_up, kinks_dn)):
                break
            redrawn += 1
            assert redrawn < 20, "too many probes straddle a ReLU kink"
        fd = (up - dn) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-7))
        checked += 1
    return worst, checked


@pytest.mark.parametrize("seed", range(20))
def test_full_chain_gradient(seed, monkeypatch):
    worst, checked = _check_instance(seed, monkeypatch)
    assert checked == 16
    assert worst <= 1e-4


# --- training ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_batch():
    return synth.make_dataset(2, seed=7, size=(16, 32))


def test_lr_zero_leaves_params(tiny_batch):
    params = fn.NetParams.init(TOY, 0)
    new, loss = fn.train_step(tiny_batch, params, 0.0)
    assert np.isfinite(loss)
    for name in params.arrays:
        np.testing.assert_array_equal(new.arrays[name], params.arrays[name])


def test_train_step_deterministic_and_finite(tiny_batch):
    params = fn.NetParams.init(TOY, 0)
    a, la = fn.train_step(tiny_batch, params, 0.01)
    b, lb = fn.train_step(tiny_batch, params, 0.01)
    assert la == lb and np.isfinite(la)
    for name in a.arrays:
        np.testing.assert_array_equal(a.arrays[name], b.arrays[name])
    assert np.isfinite(fn.mean_loss(tiny_batch, a))


def test_train_step_empty_batch():
    with pytest.raises(ValueError):
        fn.train_step([], fn.NetParams.init(TOY, 0), 0.1)


def test_adam_moves_params(tiny_batch):
    params = fn.NetParams.init(TOY, 0)
    _, grads = fn.batch_gradient(tiny_batch, params)
    new = fn.Adam(lr=1e-3).step(params, grads)
    moved = [name for name in params.arrays if not np.array_equal(new[name], params[name])]
    assert moved


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = fn.NetParams.init(TOY, 11)
    path = tmp_path / "toy.ckpt"
    params.save(path)
    loaded = fn.NetParams.load(path)
    assert loaded.seed == 11 and loaded.arch == TOY
    I_l, I_r, S_l, S_r, _ = toy_inputs(np.random.default_rng(11))
    a, _ = fn.forward_full(I_l, I_r, S_l, S_r, 50.0, 0.5, params)
    b, _ = fn.forward_full(I_l, I_r, S_l, S_r, 50.0, 0.5, loaded)
    np.testing.assert_array_equal(a.depth, b.depth)
    assert loaded.to_bytes() == params.to_bytes()


def test_checkpoint_header_layout():
    raw = fn.NetParams.init(TOY, 0).to_bytes()
    assert raw.startswith(b"PLCKPT1\n")
    n = int.from_bytes(raw[8:16], "little")
    import json
    header = json.loads(raw[16:16 + n])
    assert header["format"] == 1
    assert [a["name"] for a in header["arrays"]] == list(TOY.param_shapes())


@pytest.mark.parametrize("mutate", [
    lambda r: b"NOTACKPT" + r[8:],
    lambda r: r[:-8],
    lambda r: r[:20],
])
def test_checkpoint_corruption(mutate):
    raw = fn.NetParams.init(TOY, 0).to_bytes()
    with pytest.raises(FormatError):
        fn.NetParams.from_bytes(mutate(raw))
