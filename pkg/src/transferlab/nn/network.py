from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import Conv2d, Dense, Dropout, Layer, MaxPool2x2, ReLU, Shape, ShapeError, parse_layer

PRESET_NAMES = ("FC-2", "FC-4", "Conv-2", "Conv-4")


def _conv_head(body: list[Layer], input_shape: Shape, num_classes: int) -> list[Layer]:
    shape = input_shape
    for layer in body:
        shape = layer.output_shape(shape)
    flat = int(np.prod(shape))
    return body + [Dense(flat, 128), ReLU(), Dropout(0.5), Dense(128, num_classes)]


def preset_layers(name: str, input_shape: Shape = (1, 28, 28), num_classes: int = 10) -> list[Layer]:
    """Layer stack of a named preset.

    For 1x28x28 inputs and 10 classes, FC-2, FC-4 and Conv-2 reproduce the
    reference table layer for layer (Dense layers flatten their input).
    Conv-4 uses valid convolutions, which leave 128x4x4 = 2048 units before
    the head.
    """
    c = input_shape[0]
    d = int(np.prod(input_shape))
    if name == "FC-2":
        return [Dense(d, 500), ReLU(), Dense(500, num_classes)]
    if name == "FC-4":
        return [Dense(d, 500), ReLU(), Dense(500, 200), ReLU(), Dense(200, 100), ReLU(), Dense(100, num_classes)]
    if name == "Conv-2":
        body = [Conv2d(c, 32, 3, 1), ReLU(), Conv2d(32, 64, 3, 1), ReLU(), MaxPool2x2()]
        return _conv_head(body, input_shape, num_classes)
    if name == "Conv-4":
        body = [
            Conv2d(c, 32, 3, 1), ReLU(),
            Conv2d(32, 64, 3, 1), ReLU(),
            Conv2d(64, 128, 3, 1), ReLU(),
            MaxPool2x2(),
            Conv2d(128, 128, 3, 1), ReLU(),
            MaxPool2x2(),
        ]
        return _conv_head(body, input_shape, num_classes)
    raise KeyError(f"unknown preset {name!r}; choose from {list(PRESET_NAMES)}")


class LabelError(ValueError):
    pass


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass
class Gradients:
    loss: float
    params: list[dict[str, np.ndarray]] | None = None
    input: np.ndarray | None = None
    logits: np.ndarray | None = None


@dataclass
class Network:
    """A sequential classifier.

    ``params[i]`` holds the arrays of ``layers[i]`` (empty dict for
    parameter-free layers). ``arch`` is the preset name when built from one.
    """

    layers: list[Layer]
    params: list[dict[str, np.ndarray]]
    input_shape: Shape
    num_classes: int
    arch: str = "custom"
    training: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.input_shape
        for layer, p in zip(self.layers, self.params):
            for name, pshape in layer.param_shapes():
                if name not in p or p[name].shape != pshape:
                    raise ShapeError(f"parameter {name} of {layer.to_token()} should have shape {pshape}")
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"network output shape {shape} does not match {self.num_classes} classes")

    # -- bookkeeping --------------------------------------------------------

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    @property
    def num_params(self) -> int:
        return sum(a.size for p in self.params for a in p.values())

    def flat_params(self) -> list[np.ndarray]:
        return [p[name] for layer, p in zip(self.layers, self.params) for name, _ in layer.param_shapes()]

    def spec_string(self) -> str:
        shape = "x".join(str(s) for s in self.input_shape)
        toks = ";".join(layer.to_token() for layer in self.layers)
        return f"arch={self.arch};input={shape};classes={self.num_classes};layers={toks}"

    # -- computation --------------------------------------------------------

    def _check_batch(self, x):
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected batch of shape (n, {self.input_shape}), got {x.shape}")

    def _forward(self, x, train, rng):
        caches = []
        h = x
        for layer, p in zip(self.layers, self.params):
            h, c = layer.forward(p, h, train=train, rng=rng)
            caches.append(c)
        return h, caches

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_batch(x)
        logits, _ = self._forward(x, self.training, rng)
        return logits

    def logits(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Eval-mode logits, computed in chunks to bound memory."""
        x = np.asarray(x, dtype=np.float64)
        self._check_batch(x)
        out = [self._forward(x[i : i + chunk], False, None)[0] for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        # np.argmax returns the first maximum, so ties go to the lowest class index
        return self.logits(x, chunk).argmax(axis=1)

    def loss_and_grads(
        self,
        x: np.ndarray,
        labels: np.ndarray,
        wrt: str = "both",
        reduction: str = "mean",
        train: bool | None = None,
        rng: np.random.Generator | None = None,
    ) -> Gradients:
        """Softmax cross-entropy and its exact gradients.

        ``wrt`` is one of ``"params"``, ``"input"`` or ``"both"``.
        ``reduction="sum"`` gives per-example input gradients that do not
        depend on the batch size, which is what the attacks use.
        """
        if wrt not in ("params", "input", "both"):
            raise ValueError(f"wrt must be params, input or both, got {wrt!r}")
        x = np.asarray(x, dtype=np.float64)
        self._check_batch(x)
        labels = np.asarray(labels)
        if labels.shape != (len(x),):
            raise LabelError(f"expected {len(x)} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")
        labels = labels.astype(np.int64)
        train = self.training if train is None else train

        logits, caches = self._forward(x, train, rng)
        logp = log_softmax(logits)
        n = len(x)
        rows = np.arange(n)
        total = -logp[rows, labels].sum()
        scale = 1.0 / n if reduction == "mean" else 1.0
        dlogits = np.exp(logp)
        dlogits[rows, labels] -= 1.0
        dlogits *= scale

        want_params = wrt in ("params", "both")
        want_input = wrt in ("input", "both")
        pgrads = [dict() for _ in self.layers]
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            need_dx = want_input or i > 0
            d, g = self.layers[i].backward(self.params[i], caches[i], d, need_dx=need_dx, need_grads=want_params)
            if want_params:
                pgrads[i] = g
        return Gradients(
            loss=float(total * scale),
            params=pgrads if want_params else None,
            input=d if want_input else None,
            logits=logits,
        )

    def input_gradient(self, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Per-example gradient of the cross-entropy w.r.t. the input (eval mode)."""
        return self.loss_and_grads(x, labels, wrt="input", reduction="sum", train=False).input

    def per_example_loss(self, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        logp = log_softmax(self.logits(x))
        return -logp[np.arange(len(x)), np.asarray(labels)]


def build_architecture(
    name_or_spec: str | list,
    input_shape: Shape = (1, 28, 28),
    num_classes: int = 10,
    seed: int = 0,
) -> Network:
    """Build and initialize a network from a preset name or a layer list.

    Layer lists may mix ``Layer`` objects and token strings such as
    ``"dense(4,3)"``. Initialization is He-uniform over fan-in, drawn from
    ``seed``.
    """
    if isinstance(name_or_spec, str):
        arch = name_or_spec
        layers = preset_layers(name_or_spec, tuple(input_shape), num_classes)
    else:
        arch = "custom"
        layers = [parse_layer(l) if isinstance(l, str) else l for l in name_or_spec]
    rng = np.random.default_rng(seed)
    params = [layer.init_params(rng) for layer in layers]
    return Network(layers, params, tuple(input_shape), num_classes, arch=arch)
