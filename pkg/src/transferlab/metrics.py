"""Class-aware transferability: eligible sets, outcome classification, reports."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import AttackSpec, attack, sample_target_classes
from .nn import Network


class Outcome(enum.IntEnum):
    UNFOOLED = 0
    DIFFERENT_MISTAKE = 1
    SAME_MISTAKE = 2


class EligibilityError(ValueError):
    pass


@dataclass
class EligibleSet:
    """Adversarial examples that fool F1 on images both models get right.

    Arrays are aligned: ``x[i]`` was attacked into ``x_adv[i]``, whose true
    label is ``y[i]`` and which F1 now labels ``y1[i]``. ``target`` holds the
    attack's intended class for targeted attacks (else -1) and ``index`` the
    position of the source image in the dataset.
    """

    x: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    y1: np.ndarray
    target: np.ndarray
    index: np.ndarray
    n_sampled: int = 0
    n_both_correct: int = 0

    def __len__(self):
        return len(self.y)

    def verify(self, f1: Network, f2: Network) -> None:
        """Re-check the three defining predicates; raise on any violation."""
        if len(self) == 0:
            return
        if not (f1.predict(self.x) == self.y).all() or not (f2.predict(self.x) == self.y).all():
            raise EligibilityError("an eligible original is misclassified by F1 or F2")
        p1 = f1.predict(self.x_adv)
        if not (p1 == self.y1).all() or (self.y1 == self.y).any():
            raise EligibilityError("an eligible adversarial does not fool F1 into its recorded label")

    def subset(self, mask) -> "EligibleSet":
        return EligibleSet(
            self.x[mask], self.x_adv[mask], self.y[mask], self.y1[mask], self.target[mask], self.index[mask],
            self.n_sampled, self.n_both_correct,
        )


def both_correct_indices(models: Sequence[Network], images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    ok = np.ones(len(labels), dtype=bool)
    for m in models:
        ok &= m.predict(images) == labels
    return np.flatnonzero(ok)


def build_eligible_set(
    f1: Network,
    f2: Network,
    dataset,
    spec: AttackSpec,
    sample_n: int = 2000,
    seed: int = 0,
    correct_by: Sequence[Network] | None = None,
) -> EligibleSet:
    """Sample up to ``sample_n`` images both models classify correctly, attack
    them on F1 and keep those that fool it.

    ``correct_by`` widens the correctness filter (for the "all models of the
    roster" reading); by default only F1 and F2 are consulted. Targets for a
    targeted attack are drawn with ``spec.seed``.
    """
    if sample_n > len(dataset):
        raise ValueError(f"sample_n {sample_n} exceeds dataset size {len(dataset)}")
    filt = list(correct_by) if correct_by is not None else [f1, f2]
    ok = both_correct_indices(filt, dataset.images, dataset.labels)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.permutation(ok)[:sample_n])
    x = dataset.images[chosen]
    y = dataset.labels[chosen]
    if spec.objective == "targeted":
        target = sample_target_classes(y, f1.num_classes, spec.seed)
        x_adv = attack(f1, x, target, spec)
    elif spec.objective == "nontargeted":
        target = np.full(len(y), -1, dtype=np.int64)
        x_adv = attack(f1, x, y, spec)
    else:
        raise ValueError("eligible sets are built from single-model attacks")
    y1 = f1.predict(x_adv) if len(x) else np.zeros(0, dtype=np.int64)
    fooled = y1 != y
    return EligibleSet(
        x[fooled], x_adv[fooled], y[fooled], y1[fooled], target[fooled], chosen[fooled],
        n_sampled=len(chosen), n_both_correct=len(ok),
    )


def classify_outcome(f2_label, y, y1):
    """Outcome codes for F2's labels on the adversarials (vectorized)."""
    f2_label, y, y1 = np.asarray(f2_label), np.asarray(y), np.asarray(y1)
    out = np.full(f2_label.shape, int(Outcome.DIFFERENT_MISTAKE), dtype=np.int64)
    out[f2_label == y1] = int(Outcome.SAME_MISTAKE)
    out[f2_label == y] = int(Outcome.UNFOOLED)
    return out


def classify_items(f2: Network, eligible: EligibleSet) -> np.ndarray:
    if len(eligible) == 0:
        return np.zeros(0, dtype=np.int64)
    return classify_outcome(f2.predict(eligible.x_adv), eligible.y, eligible.y1)


@dataclass
class TransferReport:
    f1_id: str
    f2_id: str
    n_eligible: int
    unfooled: int
    different_mistake: int
    same_mistake: int
    attack: AttackSpec
    dataset_id: str = ""
    targeted: bool = False
    y1_is_target: int | None = None  # how many items landed on the intended target
    f1_unfooled: int | None = None  # sampled both-correct images F1 resisted
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (y1, F2 label) of different mistakes

    def __post_init__(self):
        if self.unfooled + self.different_mistake + self.same_mistake != self.n_eligible:
            raise ValueError("outcome counts must sum to n_eligible")

    @property
    def ratios(self) -> tuple[float, float, float] | None:
        """(unfooled, different, same) ratios, or None when nothing was eligible."""
        if self.n_eligible == 0:
            return None
        n = self.n_eligible
        return (self.unfooled / n, self.different_mistake / n, self.same_mistake / n)

    @property
    def fooled_ratio(self) -> float | None:
        r = self.ratios
        return None if r is None else r[1] + r[2]

    def to_dict(self) -> dict:
        r = self.ratios
        return {
            "f1_id": self.f1_id,
            "f2_id": self.f2_id,
            "dataset_id": self.dataset_id,
            "attack": self.attack.to_dict(),
            "n_eligible": self.n_eligible,
            "unfooled": self.unfooled,
            "different": self.different_mistake,
            "same": self.same_mistake,
            "unfooled_ratio": None if r is None else r[0],
            "different_ratio": None if r is None else r[1],
            "same_ratio": None if r is None else r[2],
            "fooled_ratio": self.fooled_ratio,
            "targeted": self.targeted,
            "y1_is_target": self.y1_is_target,
            "f1_unfooled": self.f1_unfooled,
            "different_pairs": [list(p) for p in self.pairs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


CSV_COLUMNS = [
    "f1_id", "f2_id", "attack_family", "objective", "epsilon", "steps", "n_eligible",
    "unfooled", "different", "same", "unfooled_ratio", "different_ratio", "same_ratio",
]


def fmt_float(v) -> str:
    """Pinned decimal formatting for CSV output; empty string for undefined."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return format(float(v), ".10g")


def report_csv_row(rep: TransferReport) -> list[str]:
    r = rep.ratios or (None, None, None)
    return [
        rep.f1_id, rep.f2_id, rep.attack.family, rep.attack.objective, fmt_float(rep.attack.epsilon),
        str(rep.attack.steps), str(rep.n_eligible), str(rep.unfooled), str(rep.different_mistake),
        str(rep.same_mistake), fmt_float(r[0]), fmt_float(r[1]), fmt_float(r[2]),
    ]


def reports_to_csv(reports: Sequence[TransferReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        w.writerow(report_csv_row(rep))
    return buf.getvalue()


def transfer_report(
    f2: Network,
    eligible: EligibleSet,
    attack_spec: AttackSpec,
    f1_id: str = "F1",
    f2_id: str = "F2",
    dataset_id: str = "",
) -> TransferReport:
    outcomes = classify_items(f2, eligible)
    counts = np.bincount(outcomes, minlength=3)
    targeted = attack_spec.objective == "targeted"
    on_target = int((eligible.y1 == eligible.target).sum()) if targeted else None
    pairs = []
    if len(eligible):
        f2_labels = f2.predict(eligible.x_adv)
        diff = outcomes == int(Outcome.DIFFERENT_MISTAKE)
        pairs = [(int(a), int(b)) for a, b in zip(eligible.y1[diff], f2_labels[diff])]
    return TransferReport(
        f1_id=f1_id,
        f2_id=f2_id,
        n_eligible=len(eligible),
        unfooled=int(counts[Outcome.UNFOOLED]),
        different_mistake=int(counts[Outcome.DIFFERENT_MISTAKE]),
        same_mistake=int(counts[Outcome.SAME_MISTAKE]),
        attack=attack_spec,
        dataset_id=dataset_id,
        targeted=targeted,
        y1_is_target=on_target,
        f1_unfooled=eligible.n_sampled - len(eligible),
        pairs=pairs,
    )


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Pearson correlation; None when either side has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("pearson needs two equal-length sequences of at least 3 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))
