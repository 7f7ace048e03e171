"""Toy late-fusion stereo + sparse-LiDAR depth network.

Layout per stereo side (left and right share every weight):

* image tower and LiDAR tower, each a stem conv followed by ``n_stages``
  stride-2 residual stages (1/16 resolution for the default 4 stages);
* a decoder of ``n_up`` up-projection stages per tower (nearest x2
  upsample, 3x3 conv, residual 1x1 skip) back to 1/4 resolution; the
  LiDAR decoder output is added into the image decoder at every scale;
* the fused 1/4-resolution features of both sides feed the depth cost
  volume (``cost_volume.DeCVRegressor``), whose soft-argmin depth is
  bilinearly upsampled to the input size.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .cost_volume import DeCVRegressor, DepthHypothesisGrid, smooth_l1_loss
from .errors import FormatError, ShapeError
from .kitti_io import DepthMap

TOWERS = ("img", "lidar")
CKPT_MAGIC = b"PLCKPT1\n"


@dataclass(frozen=True)
class Architecture:
    c0: int = 16
    feat: int = 32
    n_stages: int = 4
    n_up: int = 3
    downsample: int = 4
    max_disp: int = 24
    d_min: float = 1.0
    d_max: float = 80.0
    k_depth: int = 96
    aggregation: bool = True
    lidar_norm: float = 80.0
    init_scale: float = 1.0

    def __post_init__(self):
        n_upsample = self.n_upsample
        if n_upsample < 0 or n_upsample > self.n_up:
            raise ValueError(
                f"{self.n_up} up-stages cannot bring 1/{2 ** self.n_stages} back to 1/{self.downsample}")

    @property
    def n_upsample(self) -> int:
        return int(round(math.log2(2 ** self.n_stages / self.downsample)))

    @property
    def grid(self) -> DepthHypothesisGrid:
        return DepthHypothesisGrid(self.d_min, self.d_max, self.k_depth)

    @property
    def stride_total(self) -> int:
        return 2 ** self.n_stages

    def stage_channels(self) -> list[int]:
        return [self.c0 * 2 ** (i + 1) for i in range(self.n_stages)]

    def up_channels(self) -> list[int]:
        top = self.stage_channels()[-1]
        chans = [max(top // 2 ** (i + 1), 1) for i in range(self.n_up - 1)]
        return chans + [self.feat]

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for tower, cin in (("img", 3), ("lidar", 2)):
            shapes[f"{tower}.stem.w"] = (self.c0, cin, 3, 3)
            shapes[f"{tower}.stem.b"] = (self.c0,)
            c = self.c0
            for i, co in enumerate(self.stage_channels()):
                p = f"{tower}.stage{i}"
                shapes[p + ".conv1.w"] = (co, c, 3, 3)
                shapes[p + ".conv1.b"] = (co,)
                shapes[p + ".conv2.w"] = (co, co, 3, 3)
                shapes[p + ".conv2.b"] = (co,)
                shapes[p + ".skip.w"] = (co, c, 1, 1)
                shapes[p + ".skip.b"] = (co,)
                c = co
            for i, co in enumerate(self.up_channels()):
                p = f"{tower}.up{i}"
                shapes[p + ".conv1.w"] = (co, c, 3, 3)
                shapes[p + ".conv1.b"] = (co,)
                shapes[p + ".conv2.w"] = (co, co, 3, 3)
                shapes[p + ".conv2.b"] = (co,)
                shapes[p + ".skip.w"] = (co, c, 1, 1)
                shapes[p + ".skip.b"] = (co,)
                c = co
        if self.aggregation:
            shapes["agg.w"] = (self.max_disp, self.feat)
            shapes["agg.b"] = (self.max_disp,)
            shapes["agg.log_scale"] = (1,)
        return shapes


@dataclass
class NetParams:
    arch: Architecture
    arrays: dict
    seed: int = 0

    @classmethod
    def init(cls, arch: Architecture, seed: int = 0) -> "NetParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in arch.param_shapes().items():
            if name.endswith(".b") or name == "agg.log_scale":
                arrays[name] = np.zeros(shape)
            elif name == "agg.w":
                arrays[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                std = arch.init_scale * math.sqrt(2.0 / fan_in)
                if ".conv2." in name:
                    # keep residual branches small at init
                    std *= 0.5
                arrays[name] = rng.normal(0.0, std, size=shape)
        return cls(arch, arrays, seed)

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "NetParams":
        return NetParams(self.arch, {k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def validate(self) -> None:
        expected = self.arch.param_shapes()
        missing = sorted(set(expected) - set(self.arrays))
        extra = sorted(set(self.arrays) - set(expected))
        if missing or extra:
            raise ShapeError(f"parameter set does not match architecture: missing={missing[:5]} extra={extra[:5]}")
        for name, shape in expected.items():
            if self.arrays[name].shape != tuple(shape):
                raise ShapeError(
                    f"parameter {name} has shape {self.arrays[name].shape}, architecture expects {tuple(shape)}")

    # ---- checkpoint container ---------------------------------------------
    def to_bytes(self) -> bytes:
        names = list(self.arch.param_shapes())
        entries, blobs, offset = [], [], 0
        for name in names:
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            entries.append({"name": name, "dtype": "<f8", "shape": list(arr.shape),
                            "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = {"format": 1, "seed": int(self.seed), "arch": asdict(self.arch), "arrays": entries}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<Q", len(hbytes)))
        buf.write(hbytes)
        for blob in blobs:
            buf.write(blob)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "NetParams":
        if raw[:8] != CKPT_MAGIC:
            raise FormatError("not a pseudolidar checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        try:
            header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        except ValueError as exc:
            raise FormatError("corrupt checkpoint header") from exc
        if header.get("format") != 1:
            raise FormatError(f"unsupported checkpoint format {header.get('format')}")
        try:
            arch = Architecture(**header["arch"])
        except TypeError as exc:
            raise FormatError(f"checkpoint architecture descriptor not understood: {exc}") from exc
        base = 16 + hlen
        arrays = {}
        for e in header["arrays"]:
            start = base + e["offset"]
            if start + e["nbytes"] > len(raw):
                raise FormatError(f"checkpoint truncated inside array {e['name']}")
            arr = np.frombuffer(raw, dtype=e["dtype"], count=e["nbytes"] // 8, offset=start)
            arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        params = cls(arch, arrays, header["seed"])
        params.validate()
        return params

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "NetParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# --------------------------------------------------------------------------- #
# Tower forward / backward
# --------------------------------------------------------------------------- #

def _conv(P: NetParams, name, x, stride=1):
    return nn.conv2d(x, P[name + ".w"], P[name + ".b"], stride)


def _conv_back(grads, name, dout, cache):
    dx, dw, db = nn.conv2d_backward(dout, cache)
    grads[name + ".w"] = grads.get(name + ".w", 0.0) + dw
    grads[name + ".b"] = grads.get(name + ".b", 0.0) + db
    return dx


def _block_forward(P, prefix, x, stride, upsample, final_relu):
    xin = nn.upsample2x_nearest(x) if upsample else x
    h1, c1 = _conv(P, prefix + ".conv1", xin, stride)
    h1r, m1 = nn.relu(h1)
    h2, c2 = _conv(P, prefix + ".conv2", h1r)
    s, cs = _conv(P, prefix + ".skip", xin, stride)
    out = nn.add(h2, s)
    mo = None
    if final_relu:
        out, mo = nn.relu(out)
    return out, (prefix, upsample, c1, m1, c2, cs, mo)


def _block_backward(grads, dout, cache):
    prefix, upsample, c1, m1, c2, cs, mo = cache
    if mo is not None:
        dout = nn.relu_backward(dout, mo)
    dh1r = _conv_back(grads, prefix + ".conv2", dout, c2)
    dxin = _conv_back(grads, prefix + ".skip", dout, cs)
    dxin = dxin + _conv_back(grads, prefix + ".conv1", nn.relu_backward(dh1r, m1), c1)
    return nn.upsample2x_nearest_backward(dxin) if upsample else dxin


def _encode(P, tower, x):
    caches = []
    h, c = _conv(P, f"{tower}.stem", x)
    h, m = nn.relu(h)
    caches.append((c, m))
    for i in range(P.arch.n_stages):
        h, cb = _block_forward(P, f"{tower}.stage{i}", h, 2, False, True)
        caches.append(cb)
    return h, caches


def _encode_backward(grads, tower, dh, caches):
    for cb in reversed(caches[1:]):
        dh = _block_backward(grads, dh, cb)
    c, m = caches[0]
    return _conv_back(grads, f"{tower}.stem", nn.relu_backward(dh, m), c)


def image_input(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be H x W x 3, got {img.shape}")
    return img.transpose(2, 0, 1)[None]


def lidar_input(sparse, norm: float = 80.0) -> np.ndarray:
    if isinstance(sparse, DepthMap):
        depth, valid = sparse.depth, sparse.valid
    else:
        depth = np.asarray(sparse, dtype=np.float64)
        valid = depth > 0
    return np.stack([np.where(valid, depth / norm, 0.0), valid.astype(np.float64)])[None]


def _features_forward(P: NetParams, x_img: np.ndarray, x_lid: np.ndarray):
    arch = P.arch
    h, w = x_img.shape[2:]
    if h % arch.stride_total or w % arch.stride_total:
        raise ShapeError(f"input {h}x{w} is not divisible by {arch.stride_total}")
    if x_lid.shape[2:] != (h, w):
        raise ShapeError(f"image {h}x{w} and sparse depth {x_lid.shape[2:]} differ in size")
    zi, enc_i = _encode(P, "img", x_img)
    zl, enc_l = _encode(P, "lidar", x_lid)
    dec = []
    last = arch.n_up - 1
    for k in range(arch.n_up):
        up = k < arch.n_upsample
        zl, cl = _block_forward(P, f"lidar.up{k}", zl, 1, up, k != last)
        zi, ci = _block_forward(P, f"img.up{k}", zi, 1, up, k != last)
        zi = nn.add(zi, zl)
        dec.append((cl, ci))
    # unit-length features bound the matching cost to [-1, 1]
    feat, cn = nn.l2_normalize(zi)
    return feat[0], (enc_i, enc_l, dec, cn)


def _features_backward(P: NetParams, grads: dict, dfeat: np.ndarray, cache):
    enc_i, enc_l, dec, cn = cache
    dzi = nn.l2_normalize_backward(dfeat[None], cn)
    dzl = np.zeros_like(dzi)
    for cl, ci in reversed(dec):
        # zi_k = up_i(zi_{k-1}) + zl_k  and zl_k feeds up_l(k+1)
        dzl = dzl + dzi
        dzi = _block_backward(grads, dzi, ci)
        dzl = _block_backward(grads, dzl, cl)
    dximg = _encode_backward(grads, "img", dzi, enc_i)
    dxlid = _encode_backward(grads, "lidar", dzl, enc_l)
    return dximg, dxlid


def extract_features(image, sparse, params: NetParams) -> np.ndarray:
    """``(F, H/4, W/4)`` fused features for one (image, sparse depth) pair."""
    feat, _ = _features_forward(params, image_input(image), lidar_input(sparse, params.arch.lidar_norm))
    return feat


# --------------------------------------------------------------------------- #
# Aggregation hook and the full depth forward
# --------------------------------------------------------------------------- #

class UnaryAggregation:
    """Learned refinement of the disparity cost volume.

    ``cost' = exp(log_scale) * cost + W @ left + b``: a positive gain on the
    matching cost plus a per-pixel, per-disparity term from the left features.
    """

    def __init__(self, params: NetParams, grads: dict | None = None):
        self.params = params
        self.grads = grads if grads is not None else {}
        self._left = None

    def forward(self, cost, left):
        self._left = left
        self._cost = cost
        w, b = self.params["agg.w"], self.params["agg.b"]
        scale = np.exp(self.params["agg.log_scale"][0])
        return scale * cost + np.einsum("dc,chw->dhw", w, left) + b[:, None, None]

    def backward(self, dcost):
        w = self.params["agg.w"]
        scale = np.exp(self.params["agg.log_scale"][0])
        g = np.array([scale * float(np.sum(dcost * self._cost))])
        self.grads["agg.log_scale"] = self.grads.get("agg.log_scale", 0.0) + g
        self.grads["agg.w"] = self.grads.get("agg.w", 0.0) + np.einsum("dhw,chw->dc", dcost, self._left)
        self.grads["agg.b"] = self.grads.get("agg.b", 0.0) + dcost.sum(axis=(1, 2))
        return scale * dcost, np.einsum("dc,dhw->chw", w, dcost)


@dataclass
class ForwardState:
    cache_l: tuple
    cache_r: tuple
    regressor: DeCVRegressor
    up_mats: tuple
    grads: dict
    input_shape: tuple


def forward_full(I_l, I_r, S_l, S_r, f_u: float, baseline: float, params: NetParams):
    """Predict a dense depth map for the left view; returns ``(DepthMap, state)``."""
    arch = params.arch
    xi_l, xi_r = image_input(I_l), image_input(I_r)
    xl_l, xl_r = lidar_input(S_l, arch.lidar_norm), lidar_input(S_r, arch.lidar_norm)
    feat_l, cache_l = _features_forward(params, xi_l, xl_l)
    feat_r, cache_r = _features_forward(params, xi_r, xl_r)
    grads: dict = {}
    agg = UnaryAggregation(params, grads) if arch.aggregation else None
    reg = DeCVRegressor(arch.max_disp, arch.grid, f_u, baseline, arch.downsample, agg)
    low = reg.forward(feat_l, feat_r)
    h, w = xi_l.shape[2:]
    depth, mats = nn.upsample_bilinear(low, (h, w))
    state = ForwardState(cache_l, cache_r, reg, mats, grads, (h, w))
    return DepthMap(depth, np.ones((h, w), dtype=bool)), state


def backward_full(ddepth: np.ndarray, params: NetParams, state: ForwardState):
    """Parameter gradients (dict) and input-image gradients for ``d loss / d depth``."""
    grads = state.grads
    dlow = nn.upsample_bilinear_backward(ddepth, state.up_mats)
    dfl, dfr = state.regressor.backward(dlow)
    dimg_l, _ = _features_backward(params, grads, dfl, state.cache_l)
    dimg_r, _ = _features_backward(params, grads, dfr, state.cache_r)
    for name, shape in params.arch.param_shapes().items():
        if name not in grads:
            grads[name] = np.zeros(shape)
    return grads, (dimg_l[0].transpose(1, 2, 0), dimg_r[0].transpose(1, 2, 0))


def sample_loss(sample, params: NetParams, zero_lidar: bool = False, with_grad: bool = True):
    """Smooth-L1 depth loss of one sample (and its parameter gradients)."""
    S_l, S_r = sample.sparse_l, sample.sparse_r
    if zero_lidar:
        S_l = DepthMap.empty(*S_l.shape)
        S_r = DepthMap.empty(*S_r.shape)
    calib = sample.calib
    pred, state = forward_full(sample.image_l, sample.image_r, S_l, S_r,
                               calib.f_u, calib.baseline, params)
    loss, dpred = smooth_l1_loss(pred.depth, sample.gt.depth, sample.gt.valid)
    if not with_grad:
        return loss, None
    grads, _ = backward_full(dpred, params, state)
    return loss, grads


def batch_gradient(batch, params: NetParams, zero_lidar: bool = False):
    """Mean loss and mean parameter gradients over ``batch``."""
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    acc = {name: np.zeros(shape) for name, shape in params.arch.param_shapes().items()}
    for sample in batch:
        loss, grads = sample_loss(sample, params, zero_lidar)
        total += loss
        for name in acc:
            acc[name] += grads[name]
    n = len(batch)
    return total / n, {name: g / n for name, g in acc.items()}


def train_step(batch, params: NetParams, lr: float, zero_lidar: bool = False):
    """One full-batch gradient-descent step; returns ``(new_params, loss)``.

    ``loss`` is the mean batch loss evaluated at the incoming parameters.
    """
    loss, grads = batch_gradient(batch, params, zero_lidar)
    new = params.copy()
    for name, g in grads.items():
        new.arrays[name] = params.arrays[name] - lr * g
    return new, loss


class Adam:
    """Adaptive-moment optimizer state; ``step`` returns new parameters."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: NetParams, grads: dict) -> NetParams:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        new = params.copy()
        for name, g in grads.items():
            m = self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            new.arrays[name] = params.arrays[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return new


def mean_loss(batch, params: NetParams, zero_lidar: bool = False) -> float:
    return float(np.mean([sample_loss(s, params, zero_lidar, with_grad=False)[0] for s in batch]))
