"""Layer definitions for the numpy network engine.

Layers are stateless descriptions. Parameters live on the owning
``Network`` and every forward call returns a cache that the matching
backward call consumes, so a trained model can be shared by concurrent
attacks without anyone mutating it.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Shape = tuple[int, ...]


class ShapeError(ValueError):
    pass


def _prod(shape: Shape) -> int:
    out = 1
    for s in shape:
        out *= s
    return out


@dataclass(frozen=True)
class Layer:
    """Base class; subclasses implement shape inference and the two passes."""

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def param_shapes(self) -> list[tuple[str, Shape]]:
        return []

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def forward(self, params, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, params, cache, dout, need_dx=True, need_grads=True):
        raise NotImplementedError

    def to_token(self) -> str:
        raise NotImplementedError


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    # float32-representable so checkpoints round-trip exactly
    return rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int

    def __post_init__(self):
        if self.in_features <= 0 or self.out_features <= 0:
            raise ShapeError(f"Dense dimensions must be positive, got {self}")

    def output_shape(self, input_shape):
        if _prod(input_shape) != self.in_features:
            raise ShapeError(
                f"Dense({self.in_features},{self.out_features}) cannot take input of shape {input_shape}"
            )
        return (self.out_features,)

    def param_shapes(self):
        return [("weight", (self.in_features, self.out_features)), ("bias", (self.out_features,))]

    def init_params(self, rng):
        w = _he_uniform(rng, (self.in_features, self.out_features), self.in_features)
        return {"weight": w, "bias": np.zeros(self.out_features)}

    def forward(self, params, x, train=False, rng=None):
        flat = x.reshape(x.shape[0], -1)
        return flat @ params["weight"] + params["bias"], (x.shape, flat)

    def backward(self, params, cache, dout, need_dx=True, need_grads=True):
        in_shape, flat = cache
        grads = {"weight": flat.T @ dout, "bias": dout.sum(axis=0)} if need_grads else {}
        dx = (dout @ params["weight"].T).reshape(in_shape) if need_dx else None
        return dx, grads

    def to_token(self):
        return f"dense({self.in_features},{self.out_features})"


@dataclass(frozen=True)
class Conv2d(Layer):
    """Valid (unpadded) 2-D convolution, NCHW layout."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) <= 0:
            raise ShapeError(f"Conv2d dimensions must be positive, got {self}")

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"{self.to_token()} cannot take input of shape {input_shape}")
        _, h, w = input_shape
        oh = (h - self.kernel) // self.stride + 1
        ow = (w - self.kernel) // self.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"{self.to_token()}: input {input_shape} smaller than kernel")
        return (self.out_channels, oh, ow)

    def param_shapes(self):
        k = self.kernel
        return [("weight", (self.out_channels, self.in_channels, k, k)), ("bias", (self.out_channels,))]

    def init_params(self, rng):
        k = self.kernel
        fan_in = self.in_channels * k * k
        w = _he_uniform(rng, (self.out_channels, self.in_channels, k, k), fan_in)
        return {"weight": w, "bias": np.zeros(self.out_channels)}

    def _cols(self, x):
        # rows are output pixels, columns ordered (ki, kj, channel)
        k, s = self.kernel, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, oh, ow = win.shape[:4]
        return win.transpose(0, 2, 3, 4, 5, 1).reshape(n * oh * ow, k * k * c), (oh, ow)

    def _wmat(self, weight):
        return weight.transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def forward(self, params, x, train=False, rng=None):
        cols, (oh, ow) = self._cols(x)
        out = cols @ self._wmat(params["weight"]).T + params["bias"]
        out = out.reshape(x.shape[0], oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return out, (x.shape, cols, oh, ow)

    def backward(self, params, cache, dout, need_dx=True, need_grads=True):
        x_shape, cols, oh, ow = cache
        n, c = x_shape[:2]
        k, s = self.kernel, self.stride
        dflat = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_channels)
        grads = {}
        if need_grads:
            dw = (dflat.T @ cols).reshape(self.out_channels, k, k, c).transpose(0, 3, 1, 2)
            grads = {"weight": np.ascontiguousarray(dw), "bias": dflat.sum(axis=0)}
        if not need_dx:
            return None, grads
        dcols = (dflat @ self._wmat(params["weight"])).reshape(n, oh, ow, k, k, c)
        dxt = np.zeros((n, x_shape[2], x_shape[3], c))
        for i in range(k):
            for j in range(k):
                dxt[:, i : i + s * oh : s, j : j + s * ow : s, :] += dcols[:, :, :, i, j, :]
        return dxt.transpose(0, 3, 1, 2), grads

    def to_token(self):
        return f"conv2d({self.in_channels},{self.out_channels},{self.kernel},{self.stride})"


@dataclass(frozen=True)
class ReLU(Layer):
    def forward(self, params, x, train=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dout, need_dx=True, need_grads=True):
        return dout * cache, {}

    def to_token(self):
        return "relu"


@dataclass(frozen=True)
class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[1] < 2 or input_shape[2] < 2:
            raise ShapeError(f"maxpool needs a (C,H,W) input of at least 2x2, got {input_shape}")
        c, h, w = input_shape
        return (c, h // 2, w // 2)

    def forward(self, params, x, train=False, rng=None):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        blocks = x[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, oh, ow, 4)
        # first maximal element wins, like the usual argmax convention
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, params, cache, dout, need_dx=True, need_grads=True):
        x_shape, idx = cache
        n, c, h, w = x_shape
        oh, ow = h // 2, w // 2
        blocks = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
        blocks = blocks.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
        dx = np.zeros(x_shape)
        dx[:, :, : 2 * oh, : 2 * ow] = blocks
        return dx, {}

    def to_token(self):
        return "maxpool2x2"


@dataclass(frozen=True)
class Dropout(Layer):
    """Inverted dropout: identity in eval mode, unbiased in train mode."""

    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ShapeError(f"dropout rate must lie in [0, 1), got {self.rate}")

    def forward(self, params, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("train-mode dropout needs a random generator")
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, params, cache, dout, need_dx=True, need_grads=True):
        return (dout if cache is None else dout * cache), {}

    def to_token(self):
        return f"dropout({self.rate!r})"


@dataclass(frozen=True)
class Flatten(Layer):
    def output_shape(self, input_shape):
        return (_prod(input_shape),)

    def forward(self, params, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dout, need_dx=True, need_grads=True):
        return dout.reshape(cache), {}

    def to_token(self):
        return "flatten"


_TOKEN = re.compile(r"^([a-z0-9]+)(?:\((.*)\))?$")


def parse_layer(token: str) -> Layer:
    """Inverse of ``Layer.to_token``; also accepts a few readable aliases."""
    m = _TOKEN.match(token.strip().lower().replace(" ", ""))
    if not m:
        raise ValueError(f"cannot parse layer token {token!r}")
    kind, args = m.group(1), m.group(2)
    vals = [a for a in (args or "").split(",") if a]
    if kind in ("dense", "linear"):
        return Dense(int(vals[0]), int(vals[1]))
    if kind in ("conv2d", "conv"):
        ints = [int(v) for v in vals]
        return Conv2d(*ints)
    if kind == "relu":
        return ReLU()
    if kind in ("maxpool2x2", "maxpool"):
        return MaxPool2x2()
    if kind == "dropout":
        return Dropout(float(vals[0])) if vals else Dropout()
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")
