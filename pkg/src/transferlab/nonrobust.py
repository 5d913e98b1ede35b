"""Non-robust dataset construction: N-targeted AEs relabeled by either model's
target, then fresh models trained on them and scored on the clean test set."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, l2_norms, n_targeted, sample_target_classes
from .data import LabeledDataset, read_idx_array, write_idx_array, write_idx_labels, _read_idx, IDX_LABELS_MAGIC
from .metrics import fmt_float
from .nn import Network, OptimizerConfig, build_architecture, evaluate, fit


@dataclass
class NonRobustBuildSpec:
    f1_id: str = "F1"
    f2_id: str = "F2"
    attack: AttackSpec = field(default_factory=lambda: AttackSpec("PGD", 2.0, objective="ntargeted"))
    replication: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.replication < 1:
            raise ValueError("replication must be >= 1")
        if self.attack.objective != "ntargeted":
            raise ValueError("non-robust sets are built with the N-targeted objective")


@dataclass
class Provenance:
    source_index: np.ndarray
    true_label: np.ndarray
    y1_target: np.ndarray
    y2_target: np.ndarray
    f1_hit: np.ndarray
    f2_hit: np.ndarray
    distance: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        out = {}
        for k in cls.__dataclass_fields__:
            dt = np.float64 if k == "distance" else (bool if k.endswith("_hit") else np.int64)
            out[k] = np.asarray(d[k], dtype=dt)
        return cls(**out)

    def subset(self, mask) -> "Provenance":
        return Provenance(**{k: getattr(self, k)[mask] for k in self.__dataclass_fields__})


@dataclass
class NonRobustDataset:
    images: np.ndarray
    variant: str  # "Y1" or "Y2"
    provenance: Provenance
    epsilon: float
    meta: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.provenance.y1_target if self.variant == "Y1" else self.provenance.y2_target

    def __len__(self):
        return len(self.images)

    def as_dataset(self, num_classes: int = 10) -> LabeledDataset:
        return LabeledDataset(self.images, self.labels, num_classes, f"nonrobust-{self.variant}")

    def filtered(self, require: str = "both") -> "NonRobustDataset":
        """Keep only items where the attack hit its target(s): ``"f1"``, ``"f2"`` or ``"both"``."""
        p = self.provenance
        mask = {"f1": p.f1_hit, "f2": p.f2_hit, "both": p.f1_hit & p.f2_hit}[require]
        return NonRobustDataset(self.images[mask], self.variant, p.subset(mask), self.epsilon, dict(self.meta))

    def verify(self, source: LabeledDataset | None = None, tol: float = 1e-9) -> None:
        """Re-check label provenance and (given the source set) the l2 bound."""
        p = self.provenance
        if (p.y1_target == p.true_label).any() or (p.y2_target == p.true_label).any():
            raise ValueError("a target equals the true label")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixels outside [0, 1]")
        if (p.distance > self.epsilon + tol).any():
            raise ValueError("recorded perturbation exceeds epsilon")
        if source is not None:
            dist = l2_norms(self.images - source.images[p.source_index])
            if (dist > self.epsilon + tol).any():
                raise ValueError("adversarial image farther than epsilon from its source")
            if not np.array_equal(source.labels[p.source_index], p.true_label):
                raise ValueError("true labels do not match the source dataset")

    def file_stem(self) -> str:
        m = self.meta
        return f"nonrobust_{m.get('f1_id', 'F1')}_{m.get('f2_id', 'F2')}_{self.variant}_eps{fmt_float(self.epsilon)}_seed{m.get('seed', 0)}"

    def save(self, directory: str | os.PathLike) -> list[str]:
        stem = os.path.join(str(directory), self.file_stem())
        write_idx_array(stem + "-images.idx", self.images)
        write_idx_labels(stem + "-labels.idx", self.labels)
        side = {"variant": self.variant, "epsilon": self.epsilon, "meta": self.meta, "provenance": self.provenance.to_dict()}
        with open(stem + ".json", "w", encoding="utf-8", newline="\n") as f:
            json.dump(side, f, sort_keys=True)
        return [stem + "-images.idx", stem + "-labels.idx", stem + ".json"]

    @classmethod
    def load(cls, stem: str | os.PathLike, source: LabeledDataset | None = None) -> "NonRobustDataset":
        stem = str(stem)
        with open(stem + ".json", encoding="utf-8") as f:
            side = json.load(f)
        ds = cls(read_idx_array(stem + "-images.idx"), side["variant"], Provenance.from_dict(side["provenance"]),
                 side["epsilon"], side["meta"])
        labels = _read_idx(stem + "-labels.idx", IDX_LABELS_MAGIC, "labels").astype(np.int64)
        if not np.array_equal(labels, ds.labels):
            raise ValueError("label file disagrees with the recorded targets")
        ds.verify(source)
        return ds


@dataclass
class SuccessStats:
    f1_rate: float
    f2_rate: float
    joint_rate: float
    same_target_rate: float
    n: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def success_breakdown(prov: Provenance) -> SuccessStats:
    """Hit rates P[F1(x')=Y1], P[F2(x')=Y2] and their joint rate."""
    n = len(prov.true_label)
    if n == 0:
        return SuccessStats(float("nan"), float("nan"), float("nan"), float("nan"), 0)
    return SuccessStats(
        f1_rate=float(prov.f1_hit.mean()),
        f2_rate=float(prov.f2_hit.mean()),
        joint_rate=float((prov.f1_hit & prov.f2_hit).mean()),
        same_target_rate=float((prov.y1_target == prov.y2_target).mean()),
        n=n,
    )


def build_nonrobust_sets(
    trainset: LabeledDataset, f1: Network, f2: Network, spec: NonRobustBuildSpec
) -> tuple[NonRobustDataset, NonRobustDataset, SuccessStats]:
    """Attack every training image ``replication`` times with independently
    drawn target pairs (Y1 for F1, Y2 for F2). Both returned datasets share
    the same image tensor; only the labels differ. Failed attacks are kept."""
    C = trainset.num_classes
    streams = np.random.SeedSequence(spec.seed).spawn(2 * spec.replication)
    imgs, provs = [], []
    n = len(trainset)
    for r in range(spec.replication):
        y = trainset.labels
        s1 = int(streams[2 * r].generate_state(1)[0])
        s2 = int(streams[2 * r + 1].generate_state(1)[0])
        t1 = sample_target_classes(y, C, s1)
        t2 = sample_target_classes(y, C, s2)
        adv = n_targeted([f1, f2], trainset.images, [t1, t2], spec.attack)
        imgs.append(adv)
        provs.append(Provenance(
            source_index=np.arange(n),
            true_label=y.copy(),
            y1_target=t1,
            y2_target=t2,
            f1_hit=f1.predict(adv) == t1,
            f2_hit=f2.predict(adv) == t2,
            distance=l2_norms(adv - trainset.images),
        ))
    images = np.concatenate(imgs)
    prov = Provenance(**{k: np.concatenate([getattr(p, k) for p in provs]) for k in Provenance.__dataclass_fields__})
    meta = {"f1_id": spec.f1_id, "f2_id": spec.f2_id, "seed": spec.seed, "attack": spec.attack.to_dict(),
            "replication": spec.replication}
    d1 = NonRobustDataset(images, "Y1", prov, spec.attack.epsilon, dict(meta))
    d2 = NonRobustDataset(images, "Y2", prov, spec.attack.epsilon, dict(meta))
    return d1, d2, success_breakdown(prov)


def random_label_control(ds: NonRobustDataset, seed: int, num_classes: int = 10) -> LabeledDataset:
    """Same images with fresh uniform labels that carry no signal."""
    labels = np.random.default_rng(seed).integers(0, num_classes, size=len(ds))
    return LabeledDataset(ds.images, labels, num_classes, "nonrobust-random")


@dataclass
class RetrainResult:
    arch: str
    variant: str
    test_accuracy: float
    train_accuracy: float
    history: dict
    model: Network | None = None

    def to_dict(self) -> dict:
        return {"arch": self.arch, "variant": self.variant, "test_accuracy": self.test_accuracy,
                "train_accuracy": self.train_accuracy, "history": self.history}


def retrain_and_eval(
    train: NonRobustDataset | LabeledDataset,
    arch: str,
    cfg: OptimizerConfig,
    clean_test: LabeledDataset,
    init_seed: int = 0,
) -> RetrainResult:
    """Train a fresh ``arch`` model on ``train`` and report the final-epoch
    clean test accuracy (no early stopping)."""
    if isinstance(train, NonRobustDataset):
        variant, data = train.variant, train.as_dataset(clean_test.num_classes)
    else:
        variant, data = train.name, train
    model = build_architecture(arch, data.input_shape, clean_test.num_classes, seed=init_seed)
    hist = fit(model, data, cfg)
    return RetrainResult(
        arch=arch,
        variant=variant,
        test_accuracy=evaluate(model, clean_test.images, clean_test.labels),
        train_accuracy=hist.train_acc[-1] if len(hist) else float("nan"),
        history=hist.to_dict(),
        model=model,
    )
