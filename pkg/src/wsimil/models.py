"""Patch encoder, downscaled-image baseline CNN, and their checkpoints.

All layers are written directly in numpy with hand-derived backward passes so
that every gradient can be checked against finite differences in float64.
Tensors use the (N, C, H, W) layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

CHECKPOINT_MAGIC = b"MILM"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def selu(x):
    x = np.asarray(x, dtype=np.float64)
    neg = SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    return np.where(x > 0, SELU_LAMBDA * x, neg)


def selu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0).astype(np.float64)


def _tanh_grad(x):
    return 1.0 - np.tanh(x) ** 2


ACTIVATIONS = {
    "selu": (selu, selu_grad),
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv2d_forward(x, weight, bias):
    """Stride-1 convolution with zero 'same' padding (odd kernels only)."""
    k = weight.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True)
    out += bias[None, :, None, None]
    return out, windows


def conv2d_backward(dout, windows, weight):
    k = weight.shape[-1]
    p = k // 2
    n, _, h, w = dout.shape
    dweight = np.einsum("nchwij,nohw->ocij", windows, dout, optimize=True)
    dbias = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros((n, weight.shape[1], h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += np.einsum(
                "nohw,oc->nchw", dout, weight[:, :, i, j], optimize=True
            )
    return dxp[:, :, p:p + h, p:p + w], dweight, dbias


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = (
        x[:, :, :2 * ho, :2 * wo]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    n, c, h, w = shape
    ho, wo = h // 2, w // 2
    dblocks = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape)
    dx[:, :, :2 * ho, :2 * wo] = (
        dblocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
    return dx


def fan_in_normal(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


# ---------------------------------------------------------------------------
# patch encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    conv_blocks: list = field(default_factory=lambda: [(16, 3), (32, 3), (64, 3)])
    activation: str = "selu"
    in_channels: int = 3
    input_tile: int = 16

    def __post_init__(self):
        self.conv_blocks = [tuple(int(v) for v in b) for b in self.conv_blocks]
        if not self.conv_blocks:
            raise ValueError("encoder needs at least one conv block")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for out_ch, k in self.conv_blocks:
            if out_ch < 1 or k < 1 or k % 2 == 0:
                raise ValueError(f"invalid conv block ({out_ch}, {k}); kernel must be odd")

    @property
    def feature_dim(self) -> int:
        return self.conv_blocks[-1][0]


class Encoder:
    """Conv -> activation -> 2x2 max-pool blocks followed by global average pooling.

    A small stand-in for a VGG-style feature extractor; the output width is the
    channel count of the last block.
    """

    def __init__(self, config: EncoderConfig | None = None):
        self.config = config or EncoderConfig()
        self._act, self._act_grad = ACTIVATIONS[self.config.activation]

    def param_shapes(self) -> dict:
        shapes = {}
        in_ch = self.config.in_channels
        for i, (out_ch, k) in enumerate(self.config.conv_blocks):
            shapes[f"conv{i}.weight"] = (out_ch, in_ch, k, k)
            shapes[f"conv{i}.bias"] = (out_ch,)
            in_ch = out_ch
        return shapes

    def init_params(self, rng) -> dict:
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".weight"):
                params[name] = fan_in_normal(rng, shape, int(np.prod(shape[1:])))
            else:
                params[name] = np.zeros(shape)
        return params

    def _check(self, params, x):
        t = self.config.input_tile
        if x.ndim != 4 or x.shape[1:] != (self.config.in_channels, t, t):
            raise ValueError(
                f"encoder input layer expects (N, {self.config.in_channels}, {t}, {t}), got {x.shape}"
            )
        for name, shape in self.param_shapes().items():
            if name not in params or params[name].shape != shape:
                got = None if name not in params else params[name].shape
                raise ValueError(f"encoder layer {name} expects shape {shape}, got {got}")

    def forward(self, params, x, return_cache=False):
        """Map tiles (N, C, t, t) to features (N, M)."""
        x = np.asarray(x, dtype=np.float64)
        self._check(params, x)
        caches = []
        h = x
        for i in range(len(self.config.conv_blocks)):
            pre, windows = conv2d_forward(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
            act = self._act(pre)
            h, pool_cache = maxpool2_forward(act)
            caches.append((windows, pre, pool_cache))
        spatial = h.shape[2:]
        feats = h.mean(axis=(2, 3))
        if return_cache:
            return feats, (caches, spatial)
        return feats

    def backward(self, params, cache, dfeats):
        """Return (param grads, input grad) given dL/dfeatures of shape (N, M)."""
        caches, (hh, ww) = cache
        n, m = dfeats.shape
        dh = np.broadcast_to(dfeats[:, :, None, None] / (hh * ww), (n, m, hh, ww)).copy()
        grads = {}
        for i in reversed(range(len(self.config.conv_blocks))):
            windows, pre, pool_cache = caches[i]
            dact = maxpool2_backward(dh, pool_cache)
            dpre = dact * self._act_grad(pre)
            dh, dw, db = conv2d_backward(dpre, windows, params[f"conv{i}.weight"])
            grads[f"conv{i}.weight"] = dw
            grads[f"conv{i}.bias"] = db
        return {name: grads[name] for name in self.param_shapes()}, dh


def encode(tiles, encoder: Encoder, params):
    """Encode a stack of normalized tiles shaped (N, t, t, C) or (N, C, t, t)."""
    tiles = np.asarray(tiles, dtype=np.float64)
    c = encoder.config.in_channels
    if tiles.ndim == 4 and tiles.shape[-1] == c and tiles.shape[1] != c:
        tiles = tiles.transpose(0, 3, 1, 2)
    return encoder.forward(params, tiles)


# ---------------------------------------------------------------------------
# downscaled whole-image baseline
# ---------------------------------------------------------------------------


@dataclass
class BaselineConfig:
    input_size: int = 1024
    channels: tuple = (8, 16, 16, 32, 32)
    kernel_size: int = 3
    in_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 5:
            raise ValueError("baseline CNN has exactly five conv-conv-maxpool blocks")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.input_size < 32:
            raise ValueError("input_size must be at least 32 for five 2x2 poolings")

    @property
    def head_dim(self) -> int:
        s = self.input_size
        for _ in range(5):
            s //= 2
        return self.channels[-1] * s * s


class BaselineCNN:
    """Five conv-conv-maxpool blocks with SELU, then a linear sigmoid head.

    Inputs are raw pixel values in [0, 255]; they are mapped to [-1, 1]
    internally so that attributions are taken with respect to pixels.
    """

    variant = "baseline"

    def __init__(self, config: BaselineConfig | None = None):
        self.config = config or BaselineConfig()

    def param_shapes(self) -> dict:
        shapes = {}
        in_ch = self.config.in_channels
        k = self.config.kernel_size
        for b, out_ch in enumerate(self.config.channels):
            for j in range(2):
                shapes[f"block{b}.conv{j}.weight"] = (out_ch, in_ch, k, k)
                shapes[f"block{b}.conv{j}.bias"] = (out_ch,)
                in_ch = out_ch
        shapes["head.weight"] = (self.config.head_dim,)
        shapes["head.bias"] = ()
        return shapes

    def init_params(self, rng) -> dict:
        params = {}
        for name, shape in self.param_shapes().items():
            if name == "head.weight":
                params[name] = fan_in_normal(rng, shape, shape[0])
            elif name.endswith(".weight"):
                params[name] = fan_in_normal(rng, shape, int(np.prod(shape[1:])))
            else:
                params[name] = np.zeros(shape)
        return params

    def _check(self, x):
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (self.config.in_channels, s, s):
            raise ValueError(
                f"baseline expects input (N, {self.config.in_channels}, {s}, {s}), got {x.shape}"
            )

    def _forward(self, params, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        h = (x - 127.5) / 127.5
        caches = []
        for b in range(5):
            for j in range(2):
                pre, windows = conv2d_forward(
                    h, params[f"block{b}.conv{j}.weight"], params[f"block{b}.conv{j}.bias"]
                )
                caches.append((windows, pre))
                h = selu(pre)
            h, pool_cache = maxpool2_forward(h)
            caches.append(pool_cache)
        flat = h.reshape(h.shape[0], -1)
        logit = flat @ params["head.weight"] + params["head.bias"]
        return logit, (caches, h.shape, flat)

    def _backward(self, params, cache, dlogit):
        caches, hshape, flat = cache
        grads = {
            "head.weight": flat.T @ dlogit,
            "head.bias": np.asarray(dlogit.sum()),
        }
        dh = np.outer(dlogit, params["head.weight"]).reshape(hshape)
        pos = len(caches) - 1
        for b in reversed(range(5)):
            dh = maxpool2_backward(dh, caches[pos])
            pos -= 1
            for j in reversed(range(2)):
                windows, pre = caches[pos]
                pos -= 1
                dpre = dh * selu_grad(pre)
                dh, dw, db = conv2d_backward(dpre, windows, params[f"block{b}.conv{j}.weight"])
                grads[f"block{b}.conv{j}.weight"] = dw
                grads[f"block{b}.conv{j}.bias"] = db
        return {name: grads[name] for name in self.param_shapes()}, dh / 127.5

    def forward(self, params, x):
        """Probability per image for a pixel batch (N, C, S, S)."""
        logit, _ = self._forward(params, x)
        return sigmoid(logit)

    def predict(self, params, x) -> float:
        return float(self.forward(params, np.asarray(x)[None])[0])

    def predict_batch(self, params, xs):
        return self.forward(params, np.stack(xs))

    def loss_and_grad(self, params, xs, ys):
        from wsimil.training import BCE_EPS, bce_loss

        x = np.stack(xs)
        ys = np.asarray(ys, dtype=np.float64)
        logit, cache = self._forward(params, x)
        p = sigmoid(logit)
        n = len(ys)
        loss = float(np.mean([bce_loss(pi, yi) for pi, yi in zip(p, ys)]))
        clipped = (p < BCE_EPS) | (p > 1.0 - BCE_EPS)
        dlogit = np.where(clipped, 0.0, (p - ys) / n)
        grads, _ = self._backward(params, cache, dlogit)
        return loss, grads

    def input_gradient(self, params, x):
        """Return (probabilities, d probability / d pixels) for a batch."""
        logit, cache = self._forward(params, x)
        p = sigmoid(logit)
        _, dx = self._backward(params, cache, p * (1.0 - p))
        return p, dx


def baseline_forward(image, model: BaselineCNN, params) -> float:
    """Probability for one downscaled image given as (S, S) or (S, S, C) pixels."""
    return model.predict(params, image_to_chw(image))


def image_to_chw(pixels):
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        return pixels[None]
    return pixels.transpose(2, 0, 1)


def _area_matrix(src: int, dst: int):
    """Sparse (dst, src) matrix whose rows average the source cells each output cell covers."""
    rows, cols, vals = [], [], []
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j = int(np.floor(lo))
        while j < hi and j < src:
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                rows.append(i)
                cols.append(j)
                vals.append(overlap / scale)
            j += 1
    return sparse.csr_matrix((vals, (rows, cols)), shape=(dst, src))


def downscale(pixels, target: int, pad_value: float = 255.0):
    """Pad to square (bottom/right) with ``pad_value`` and area-average to target x target.

    Returns float64 pixels; 2-D input stays 2-D, (H, W, C) input stays channels-last.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.size == 0:
        raise ValueError("cannot downscale an empty image")
    squeeze = pixels.ndim == 2
    if squeeze:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    side = max(h, w)
    if (h, w) != (side, side):
        padded = np.full((side, side, c), pad_value, dtype=np.float64)
        padded[:h, :w] = pixels
        pixels = padded
    if side == target:
        out = pixels.copy()
    else:
        a = _area_matrix(side, target)
        out = np.stack([a @ (a @ pixels[:, :, ch]).T for ch in range(c)], axis=-1)
        out = out.transpose(1, 0, 2)
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: dict, params: dict):
    """Write ``MILM`` | version | config JSON | float64 LE tensors in declaration order."""
    meta = dict(config)
    meta["tensors"] = [[name, list(np.shape(value))] for name, value in params.items()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for value in params.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return (config dict, params dict) from a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    meta = json.loads(data[offset:offset + n].decode("utf-8"))
    offset += n
    params = {}
    for name, shape in meta.pop("tensors"):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params[name] = arr.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after tensors")
    return meta, params


def config_dict(cfg) -> dict:
    out = asdict(cfg)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out
