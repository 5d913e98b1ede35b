"""l2-bounded gradient attacks.

Every family runs through one projected-step loop, which is what makes the
reductions exact: FGM is a single PGD step of size epsilon, MIM with zero
decay is PGD, and the N-targeted attack on one model is targeted PGD.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .nn import Network

FAMILIES = ("FGM", "PGD", "MIM")
OBJECTIVES = ("nontargeted", "targeted", "ntargeted")
GRAD_EPS = 1e-12


@dataclass
class AttackSpec:
    family: str = "PGD"
    epsilon: float = 1.0
    steps: int | None = None
    step_size: float | None = None
    objective: str = "nontargeted"
    momentum_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.family = self.family.upper()
        self.objective = self.objective.lower().replace("-", "").replace("_", "")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.momentum_decay < 0:
            raise ValueError("momentum_decay must be non-negative")
        if self.family == "FGM":
            if self.steps not in (None, 1):
                raise ValueError("FGM takes exactly one step")
            self.steps = 1
            self.step_size = self.epsilon
        elif self.objective == "ntargeted":
            self.steps = 100 if self.steps is None else self.steps
            self.step_size = 0.1 if self.step_size is None else self.step_size
        else:
            self.steps = 10 if self.steps is None else self.steps
            self.step_size = self.epsilon / 5 if self.step_size is None else self.step_size
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")

    @property
    def targeted(self) -> bool:
        return self.objective != "nontargeted"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def l2_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v.reshape(len(v), -1) ** 2).sum(axis=1))


def _bcast(vals: np.ndarray, like: np.ndarray) -> np.ndarray:
    return vals.reshape((-1,) + (1,) * (like.ndim - 1))


def project_l2(z: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Radial projection of each ``z`` onto the l2 ball of radius epsilon around ``x``."""
    delta = z - x
    norms = l2_norms(delta)
    factor = np.ones_like(norms)
    outside = norms > epsilon
    factor[outside] = epsilon / norms[outside]
    return x + delta * _bcast(factor, delta)


def _normalize(g: np.ndarray, ord: int = 2) -> tuple[np.ndarray, np.ndarray]:
    flat = g.reshape(len(g), -1)
    norms = np.abs(flat).sum(axis=1) if ord == 1 else np.sqrt((flat**2).sum(axis=1))
    ok = norms >= GRAD_EPS
    out = np.zeros_like(g)
    out[ok] = g[ok] / _bcast(norms[ok], g[ok])
    return out, ok


def _check_models(models: Sequence[Network], x: np.ndarray) -> None:
    if not models:
        raise ValueError("need at least one model")
    shapes = {m.input_shape for m in models}
    if len(shapes) != 1:
        raise ValueError(f"models disagree on input shape: {sorted(shapes)}")
    if tuple(x.shape[1:]) != models[0].input_shape:
        raise ValueError(f"inputs of shape {x.shape[1:]} do not match models' {models[0].input_shape}")


def summed_input_gradient(models: Sequence[Network], x: np.ndarray, labels: Sequence[np.ndarray]) -> np.ndarray:
    """Gradient of sum_i CE(F_i(x), labels_i) w.r.t. x, per example."""
    total = models[0].input_gradient(x, labels[0])
    for m, lab in zip(models[1:], labels[1:]):
        total = total + m.input_gradient(x, lab)
    return total


def _run(models, x, labels, spec: AttackSpec, sign: float, trace=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    adv = x.copy()
    if spec.epsilon == 0:
        return adv
    mu = spec.momentum_decay if spec.family == "MIM" else 0.0
    momentum = np.zeros_like(x)
    for _ in range(spec.steps):
        g = summed_input_gradient(models, adv, labels)
        if spec.family == "MIM" and mu != 0:
            g1, _ = _normalize(g, ord=1)
            momentum = mu * momentum + g1
            g = momentum
        direction, ok = _normalize(g)
        if not ok.any():
            continue
        z = adv.copy()
        z[ok] = adv[ok] + sign * spec.step_size * direction[ok]
        adv = np.clip(project_l2(z, x, spec.epsilon), 0.0, 1.0)
        if trace is not None:
            trace.append(adv.copy())
    return adv


def _chunked(fn, x, labels, chunk):
    if len(x) <= chunk:
        return fn(x, labels)
    outs = [fn(x[i : i + chunk], [l[i : i + chunk] for l in labels]) for i in range(0, len(x), chunk)]
    return np.concatenate(outs)


def _as_labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 0:
        labels = np.full(n, int(labels))
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    return labels


def attack(model: Network, x: np.ndarray, labels: np.ndarray, spec: AttackSpec, chunk: int = 256, trace=None):
    """Single-model FGM / PGD / MIM.

    ``labels`` are the true labels for a non-targeted objective (loss is
    maximized) and the target labels for a targeted one (loss is minimized).
    """
    if spec.objective == "ntargeted":
        raise ValueError("use n_targeted() for the N-targeted objective")
    x = np.asarray(x, dtype=np.float64)
    _check_models([model], x)
    labels = _as_labels(labels, len(x))
    sign = -1.0 if spec.targeted else 1.0
    if trace is not None:
        return _run([model], x, [labels], spec, sign, trace)
    return _chunked(lambda xb, lb: _run([model], xb, lb, spec, sign), x, [labels], chunk)


def fgm(model, x, labels, spec: AttackSpec, **kw):
    if spec.family != "FGM":
        raise ValueError("fgm() needs an FGM spec")
    return attack(model, x, labels, spec, **kw)


def pgd(model, x, labels, spec: AttackSpec, **kw):
    if spec.family != "PGD":
        raise ValueError("pgd() needs a PGD spec")
    return attack(model, x, labels, spec, **kw)


def mim(model, x, labels, spec: AttackSpec, **kw):
    if spec.family != "MIM":
        raise ValueError("mim() needs an MIM spec")
    return attack(model, x, labels, spec, **kw)


def n_targeted(
    models: Sequence[Network],
    x: np.ndarray,
    targets: Sequence[np.ndarray],
    spec: AttackSpec,
    chunk: int = 256,
    trace=None,
) -> np.ndarray:
    """Minimize the summed cross-entropy of every model toward its own targets.

    ``targets[i]`` holds one target label per image for ``models[i]``. The
    update is the projected PGD step (or the MIM step for an MIM spec).
    """
    x = np.asarray(x, dtype=np.float64)
    _check_models(models, x)
    if len(targets) != len(models):
        raise ValueError(f"{len(models)} models but {len(targets)} target lists")
    targets = [_as_labels(t, len(x)) for t in targets]
    if trace is not None:
        return _run(list(models), x, targets, spec, -1.0, trace)
    return _chunked(lambda xb, lb: _run(list(models), xb, lb, spec, -1.0), x, targets, chunk)


def ensemble_targeted(models, x, shared_target, spec: AttackSpec, **kw) -> np.ndarray:
    """Targeted attack on an ensemble: the N-targeted loss with one shared target."""
    t = _as_labels(shared_target, len(x))
    return n_targeted(models, x, [t] * len(models), spec, **kw)


def sample_target_classes(true_labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """Uniform draw over the classes other than the true one, per image."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    true_labels = np.asarray(true_labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    offset = rng.integers(1, num_classes, size=true_labels.shape)
    return (true_labels + offset) % num_classes


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    true_labels: np.ndarray
    spec: AttackSpec
    targets: list[np.ndarray] = field(default_factory=list)
    source_predictions: dict[str, np.ndarray] = field(default_factory=dict)

    def check_feasible(self, tol: float = 1e-9) -> bool:
        dist = l2_norms(self.adversarials - self.originals)
        in_box = (self.adversarials >= 0).all() and (self.adversarials <= 1).all()
        return bool((dist <= self.spec.epsilon + tol).all() and in_box)

    def save(self, stem: str | os.PathLike) -> tuple[str, str]:
        """Write ``<stem>.idx`` (float64 IDX) and ``<stem>.json``."""
        from .data import write_idx_array

        stem = str(stem)
        write_idx_array(stem + ".idx", self.adversarials)
        write_idx_array(stem + ".orig.idx", self.originals)
        meta = {
            "spec": self.spec.to_dict(),
            "true_labels": self.true_labels.tolist(),
            "targets": [t.tolist() for t in self.targets],
            "source_predictions": {k: v.tolist() for k, v in self.source_predictions.items()},
            "images": os.path.basename(stem + ".idx"),
            "originals": os.path.basename(stem + ".orig.idx"),
        }
        with open(stem + ".json", "w", encoding="utf-8", newline="\n") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
        return stem + ".idx", stem + ".json"

    @classmethod
    def load(cls, stem: str | os.PathLike) -> "AdversarialBatch":
        from .data import read_idx_array

        stem = str(stem)
        with open(stem + ".json", encoding="utf-8") as f:
            meta = json.load(f)
        return cls(
            originals=read_idx_array(stem + ".orig.idx"),
            adversarials=read_idx_array(stem + ".idx"),
            true_labels=np.asarray(meta["true_labels"], dtype=np.int64),
            spec=AttackSpec.from_dict(meta["spec"]),
            targets=[np.asarray(t, dtype=np.int64) for t in meta["targets"]],
            source_predictions={k: np.asarray(v, dtype=np.int64) for k, v in meta["source_predictions"].items()},
        )
