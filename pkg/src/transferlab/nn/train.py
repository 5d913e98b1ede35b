from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .network import Network

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    """SGD hyperparameters. Defaults follow the Fashion-MNIST training regime."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_epochs: list[int] = field(default_factory=lambda: [20])
    lr_decay_factor: float = 0.1
    epochs: int = 40
    batch_size: int = 256
    seed: int = 0
    hflip: bool = False  # optional augmentation, off by default
    random_crop: int = 0  # pad-and-crop margin in pixels, 0 disables

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor**drops

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Momentum SGD with coupled L2 weight decay.

    velocity <- momentum * velocity + (grad + weight_decay * w)
    w        <- w - lr * velocity
    """

    def __init__(self, model: Network, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]

    def step(self, grads: list[dict[str, np.ndarray]], lr: float) -> None:
        for p, g, vel in zip(self.model.params, grads, self.velocity):
            for name, w in p.items():
                d = g[name] + self.weight_decay * w if self.weight_decay else g[name]
                if self.momentum:
                    vel[name] *= self.momentum
                    vel[name] += d
                    d = vel[name]
                w -= lr * d


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def to_dict(self) -> dict:
        return asdict(self)


def round_to_float32(model: Network) -> None:
    """Snap parameters onto the float32 grid used by checkpoints."""
    for p in model.params:
        for name in p:
            p[name] = p[name].astype(np.float32).astype(np.float64)


def _augment(xb, cfg, rng):
    if cfg.hflip:
        flip = rng.random(len(xb)) < 0.5
        xb = xb.copy()
        xb[flip] = xb[flip][..., ::-1]
    if cfg.random_crop:
        m = cfg.random_crop
        n, c, h, w = xb.shape
        padded = np.pad(xb, ((0, 0), (0, 0), (m, m), (m, m)))
        offs = rng.integers(0, 2 * m + 1, size=(n, 2))
        xb = np.stack([padded[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offs)])
    return xb


def evaluate(model: Network, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        return float("nan")
    return float((model.predict(images) == labels).mean())


def fit(
    model: Network,
    train,
    cfg: OptimizerConfig,
    test=None,
    on_epoch_end: Callable[[int, Network], None] | None = None,
) -> History:
    """Train ``model`` in place with minibatch SGD.

    Shuffling and dropout masks come from a generator seeded with
    ``cfg.seed``, so two runs with the same seed and starting parameters
    follow the same trajectory. Parameters are snapped to float32 at the end
    of every epoch so that saved checkpoints reproduce the in-memory model
    exactly. ``on_epoch_end(epoch, model)`` is called with 1-based epochs.
    """
    n = len(train)
    if n == 0:
        raise ValueError("cannot fit on an empty dataset")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    hist = History()
    x_all, y_all = train.images, train.labels
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        model.train()
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.hflip or cfg.random_crop:
                xb = _augment(xb, cfg, rng)
            g = model.loss_and_grads(xb, yb, wrt="params", train=True, rng=rng)
            if not np.isfinite(g.loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch + 1}")
            if lr:
                opt.step(g.params, lr)
            total_loss += g.loss * len(idx)
            correct += int((g.logits.argmax(axis=1) == yb).sum())
        model.eval()
        if lr:
            round_to_float32(model)
        train_acc = correct / n
        test_acc = evaluate(model, test.images, test.labels) if test is not None else None
        hist.loss.append(total_loss / n)
        hist.train_acc.append(train_acc)
        hist.test_acc.append(test_acc)
        hist.lr.append(lr)
        log.info("epoch %d loss %.4f train %.4f test %s", epoch + 1, hist.loss[-1], train_acc, test_acc)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, model)
    model.eval()
    return hist
