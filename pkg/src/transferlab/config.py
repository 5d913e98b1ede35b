"""Experiment configuration: flat ``key = value`` text with dotted sections.

    # comments start with '#'
    seed = 0
    dataset.source = synthetic            # synthetic | idx | cifar
    dataset.synthetic.train_count = 3000
    train.epochs = 8
    roster.A.preset = Conv-2
    roster.A.seed = 1
    roster.B.lineage = same-init-as:A
    roster.A5.lineage = epoch-snapshot-of:A@5
    attack.pgd.family = PGD
    attack.pgd.epsilon = 0.25, 0.5, 1.0, 2.0   # a list expands into a sweep
    eval.sample_n = 2000

No nesting, quoting or escaping: a value is everything after the first '='
with surrounding blanks removed. Lists are comma separated.
"""
from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field

from .attacks import AttackSpec
from .data import SyntheticSpec
from .nn import PRESET_NAMES, OptimizerConfig


class ConfigError(ValueError):
    pass


def parse_flat(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not re.fullmatch(r"[A-Za-z0-9_\-@]+(\.[A-Za-z0-9_\-@]+)*", key):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def dump_flat(d: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(d.items()))


def _list(v: str) -> list[str]:
    return [s.strip() for s in v.split(",") if s.strip()]


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _num(v: str, kind=float, key: str = ""):
    try:
        return kind(v)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}") from None


@dataclass
class RosterEntry:
    id: str
    preset: str
    seed: int = 0
    role: str = "target"  # source | target
    lineage: str = "fresh"  # fresh | same-init-as:<id> | epoch-snapshot-of:<id>@<epoch>

    @property
    def parent(self) -> str | None:
        if self.lineage == "fresh":
            return None
        return self.lineage.split(":", 1)[1].split("@", 1)[0]

    @property
    def kind(self) -> str:
        return self.lineage.split(":", 1)[0]

    @property
    def snapshot_epoch(self) -> int | str | None:
        if self.kind != "epoch-snapshot-of":
            return None
        ep = self.lineage.rsplit("@", 1)[1]
        return "final" if ep == "final" else int(ep)

    def validate(self):
        if self.role not in ("source", "target"):
            raise ConfigError(f"roster {self.id}: role must be source or target")
        m = re.fullmatch(r"fresh|same-init-as:[^@:]+|epoch-snapshot-of:[^@:]+@(\d+|final)", self.lineage)
        if not m:
            raise ConfigError(f"roster {self.id}: bad lineage {self.lineage!r}")
        if self.preset not in PRESET_NAMES and not self.preset.startswith("layers="):
            raise ConfigError(f"roster {self.id}: unknown preset {self.preset!r}")


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    cifar_train: list[str] = field(default_factory=list)
    cifar_test: list[str] = field(default_factory=list)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train_subset: int = 0  # 0 keeps everything
    test_subset: int = 0


@dataclass
class EvalConfig:
    sample_n: int = 2000
    dist_images: int = 1000
    dist_cap: float = 2.0
    dist_tol: float = 1e-4
    seed: int = 0
    correct_by: str = "pair"  # pair | roster
    pairs: list[tuple[str, str]] = field(default_factory=list)  # empty: every source x other model


@dataclass
class GridConfig:
    images: int = 0  # number of eligible images to grid, 0 disables
    pairs: list[tuple[str, str]] = field(default_factory=list)
    epsilon: float = 1.0  # attack used to pick eligible images
    half_extent: int = 30
    resolution: int = 61
    seed: int = 0


@dataclass
class NonRobustConfig:
    enabled: bool = False
    f1: str = ""
    f2: str = ""
    epsilon: float = 2.0
    steps: int = 100
    step_size: float = 0.1
    replication: int = 1
    seed: int = 0
    train_count: int = 0  # 0 attacks the whole training set
    retrain: list[str] = field(default_factory=lambda: ["Conv-2", "FC-2"])
    control: bool = True
    save_datasets: bool = True


@dataclass
class EnsembleConfig:
    enabled: bool = False
    source: str = ""
    added: list[str] = field(default_factory=list)
    heldout: str = ""
    epsilon: float = 1.0
    steps: int = 10
    sample_n: int = 1000
    seed: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "out"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: OptimizerConfig = field(default_factory=OptimizerConfig)
    roster: list[RosterEntry] = field(default_factory=list)
    attacks: list[AttackSpec] = field(default_factory=list)
    eval: EvalConfig = field(default_factory=EvalConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    nonrobust: NonRobustConfig = field(default_factory=NonRobustConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    raw: dict[str, str] = field(default_factory=dict, repr=False)

    def model(self, mid: str) -> RosterEntry:
        for e in self.roster:
            if e.id == mid:
                return e
        raise ConfigError(f"unknown model id {mid!r}")

    def sources(self) -> list[RosterEntry]:
        return [e for e in self.roster if e.role == "source"]

    def transfer_pairs(self) -> list[tuple[str, str]]:
        if self.eval.pairs:
            return list(self.eval.pairs)
        return [(s.id, t.id) for s in self.sources() for t in self.roster if t.id != s.id]

    def config_hash(self) -> str:
        return hashlib.sha256(dump_flat(self.raw).encode()).hexdigest()

    def validate(self) -> "ExperimentConfig":
        ids = [e.id for e in self.roster]
        if len(set(ids)) != len(ids):
            raise ConfigError("model ids must be unique")
        for e in self.roster:
            e.validate()
            if e.parent is not None and e.parent not in ids:
                raise ConfigError(f"roster {e.id}: lineage refers to unknown model {e.parent!r}")
        training_order(self.roster)
        for a in self.attacks:
            if a.epsilon <= 0:
                raise ConfigError("attack epsilons must be > 0")
        pairs = list(self.eval.pairs) + list(self.grid.pairs)
        if self.nonrobust.enabled:
            pairs.append((self.nonrobust.f1, self.nonrobust.f2))
        if self.ensemble.enabled:
            pairs += [(self.ensemble.source, self.ensemble.heldout)] + [(a, a) for a in self.ensemble.added]
        for a, b in pairs:
            if a not in ids or b not in ids:
                raise ConfigError(f"pair ({a}, {b}) names an unknown model")
        if self.eval.correct_by not in ("pair", "roster"):
            raise ConfigError("eval.correct_by must be pair or roster")
        return self


def training_order(roster: list[RosterEntry]) -> list[RosterEntry]:
    """Parents before children; raises on a lineage cycle."""
    by_id = {e.id: e for e in roster}
    order, state = [], {}

    def visit(e, path):
        if state.get(e.id) == "done":
            return
        if state.get(e.id) == "open":
            raise ConfigError("lineage cycle: " + " -> ".join(path + [e.id]))
        state[e.id] = "open"
        if e.parent is not None and e.parent in by_id:
            visit(by_id[e.parent], path + [e.id])
        state[e.id] = "done"
        order.append(e)

    for e in roster:
        visit(e, [])
    return order


_ATTACK_KEYS = {"family", "epsilon", "steps", "step_size", "objective", "momentum_decay", "seed"}


def _pairs(v: str) -> list[tuple[str, str]]:
    out = []
    for item in _list(v):
        if ":" not in item:
            raise ConfigError(f"pair {item!r} must look like F1:F2")
        a, b = item.split(":", 1)
        out.append((a.strip(), b.strip()))
    return out


def _fill(obj, kv: dict[str, str], prefix: str, special=None):
    """Assign ``prefix.<field>`` keys onto a dataclass using its field types."""
    special = special or {}
    for f in obj.__dataclass_fields__.values():
        key = f"{prefix}.{f.name}"
        if key not in kv:
            continue
        v = kv.pop(key)
        cur = getattr(obj, f.name)
        if f.name in special:
            setattr(obj, f.name, special[f.name](v))
        elif isinstance(cur, bool):
            setattr(obj, f.name, _bool(v))
        elif isinstance(cur, int):
            setattr(obj, f.name, _num(v, int, key))
        elif isinstance(cur, float):
            setattr(obj, f.name, _num(v, float, key))
        elif isinstance(cur, list):
            setattr(obj, f.name, _list(v))
        else:
            setattr(obj, f.name, v)


def _int_list(v):
    return [int(s) for s in _list(v)]


def _shape(v):
    return tuple(int(s) for s in v.lower().replace("x", ",").split(",") if s.strip())


def from_flat(kv: dict[str, str]) -> ExperimentConfig:
    raw = dict(kv)
    kv = dict(kv)
    cfg = ExperimentConfig(raw=raw)
    if "seed" in kv:
        cfg.seed = _num(kv.pop("seed"), int, "seed")
    if "out" in kv:
        cfg.out = kv.pop("out")
    _fill(cfg.dataset, kv, "dataset", {"cifar_train": _list, "cifar_test": _list})
    _fill(cfg.dataset.synthetic, kv, "dataset.synthetic", {"input_shape": _shape})
    if "dataset.synthetic.seed" not in raw:
        cfg.dataset.synthetic.seed = cfg.seed
    _fill(cfg.train, kv, "train", {"lr_decay_epochs": _int_list})
    OptimizerConfig.__post_init__(cfg.train)

    ids = []
    for k in raw:
        if k.startswith("roster."):
            if k.count(".") != 2:
                raise ConfigError(f"roster keys look like roster.<id>.<field>, got {k!r}")
            if k.split(".")[1] not in ids:
                ids.append(k.split(".")[1])
    for mid in ids:
        e = RosterEntry(mid, preset="")
        _fill(e, kv, f"roster.{mid}")
        cfg.roster.append(e)
    for e in cfg.roster:
        if not e.preset:
            parent = e.parent and next((p for p in cfg.roster if p.id == e.parent), None)
            if parent is None and e.parent is not None:
                raise ConfigError(f"roster {e.id}: lineage refers to unknown model {e.parent!r}")
            if parent is None:
                raise ConfigError(f"roster {e.id}: missing preset")
            e.preset = parent.preset

    names = []
    for k in list(kv):
        if k.startswith("attack."):
            parts = k.split(".")
            if len(parts) != 3 or parts[2] not in _ATTACK_KEYS:
                raise ConfigError(f"unknown attack key {k!r}")
            if parts[1] not in names:
                names.append(parts[1])
    for name in names:
        fields = {f: kv.pop(f"attack.{name}.{f}") for f in list(_ATTACK_KEYS) if f"attack.{name}.{f}" in kv}
        eps_list = [_num(s, float, f"attack.{name}.epsilon") for s in _list(fields.pop("epsilon", "1.0"))]
        base = {}
        for f, v in fields.items():
            base[f] = v if f in ("family", "objective") else _num(v, int if f in ("steps", "seed") else float, f)
        for eps in eps_list:
            try:
                cfg.attacks.append(AttackSpec(epsilon=eps, **base))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"attack.{name}: {exc}") from None

    _fill(cfg.eval, kv, "eval", {"pairs": _pairs})
    _fill(cfg.grid, kv, "grid", {"pairs": _pairs})
    _fill(cfg.nonrobust, kv, "nonrobust")
    _fill(cfg.ensemble, kv, "ensemble")
    if kv:
        raise ConfigError("unknown keys: " + ", ".join(sorted(kv)))
    return cfg.validate()


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        return from_flat(parse_flat(f.read()))


def parse_config(text: str) -> ExperimentConfig:
    return from_flat(parse_flat(text))
