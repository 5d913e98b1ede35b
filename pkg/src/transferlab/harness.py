"""Experiment orchestration: datasets, model rosters with lineage, and the
report bundle (transfer reports, Dist tables, grids, non-robust results,
ensemble comparison) tied together by a hashed manifest."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import traceback
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackSpec, attack, ensemble_targeted, sample_target_classes
from .config import ConfigError, DatasetConfig, ExperimentConfig, RosterEntry, training_order
from .data import (
    LabeledDataset,
    generate_synthetic,
    load_cifar_binary,
    load_idx,
    write_idx,
)
from .geometry import DirectionPair, boundary_distance, boundary_grid, model_distance, outcome_overlay, save_grid
from .metrics import (
    EligibleSet,
    Outcome,
    both_correct_indices,
    build_eligible_set,
    classify_outcome,
    fmt_float,
    reports_to_csv,
    transfer_report,
)
from .nn import Network, OptimizerConfig, build_architecture, fit, load_model, save_model
from .nonrobust import NonRobustBuildSpec, build_nonrobust_sets, random_label_control, retrain_and_eval

log = logging.getLogger(__name__)


# -- data -------------------------------------------------------------------------


def load_datasets(dc: DatasetConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if dc.source == "synthetic":
        train, test = generate_synthetic(dc.synthetic)
    elif dc.source == "idx":
        train = load_idx(dc.train_images, dc.train_labels, name="train")
        test = load_idx(dc.test_images, dc.test_labels, name="test")
    elif dc.source == "cifar":
        train = load_cifar_binary(dc.cifar_train, name="train")
        test = load_cifar_binary(dc.cifar_test, name="test")
    else:
        raise ConfigError(f"unknown dataset source {dc.source!r}")
    if dc.train_subset:
        train = train.subset(np.arange(min(dc.train_subset, len(train))))
    if dc.test_subset:
        test = test.subset(np.arange(min(dc.test_subset, len(test))))
    return train, test


# -- roster -----------------------------------------------------------------------


@dataclass
class Roster:
    models: dict[str, Network]
    meta: dict[str, dict]
    files: list[str] = field(default_factory=list)

    def __getitem__(self, mid: str) -> Network:
        return self.models[mid]


def _train_cfg(cfg: ExperimentConfig, seed: int) -> OptimizerConfig:
    d = cfg.train.to_dict()
    d["seed"] = seed
    return OptimizerConfig(**d)


def _cache_key(cfg: ExperimentConfig, e: RosterEntry, seed_of: dict) -> str:
    """Everything that determines a trained model, hashed."""
    data_keys = {k: v for k, v in cfg.raw.items() if k.startswith("dataset.")}
    blob = json.dumps({
        "data": data_keys, "seed": cfg.seed, "train": cfg.train.to_dict(), "preset": e.preset,
        "model_seed": e.seed, "lineage": e.lineage, "init_seed": seed_of.get(e.id),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _lineage_root(e: RosterEntry, by_id: dict) -> RosterEntry:
    while e.kind == "same-init-as":
        e = by_id[e.parent]
    return e


def prepare_roster(
    cfg: ExperimentConfig,
    train: LabeledDataset,
    test: LabeledDataset | None = None,
    out_dir: str | None = None,
    cache_dir: str | None = None,
) -> Roster:
    """Train every roster model, honouring lineage.

    ``same-init-as:P`` starts from P's initial parameters but shuffles and
    drops out with its own seed. ``epoch-snapshot-of:P@e`` is P's state after
    epoch e of P's own run (``@final`` is P itself, ``@0`` its initialization).
    With ``cache_dir``, checkpoints are reused when their cache key matches.
    """
    by_id = {e.id: e for e in cfg.roster}
    init_seed = {e.id: _lineage_root(e, by_id).seed for e in cfg.roster if e.kind != "epoch-snapshot-of"}
    for e in cfg.roster:
        if e.kind == "same-init-as" and by_id[e.parent].preset != e.preset:
            raise ConfigError(f"roster {e.id}: same-init lineage needs the parent's preset")
    snaps: dict[str, dict[int, str]] = {}
    for e in cfg.roster:
        if e.kind == "epoch-snapshot-of":
            ep = cfg.train.epochs if e.snapshot_epoch == "final" else e.snapshot_epoch
            if ep > cfg.train.epochs:
                raise ConfigError(f"roster {e.id}: epoch {ep} beyond the {cfg.train.epochs} training epochs")
            snaps.setdefault(e.parent, {})[ep] = e.id
    models: dict[str, Network] = {}
    meta: dict[str, dict] = {}
    files: list[str] = []
    model_dir = os.path.join(out_dir, "models") if out_dir else None
    if model_dir:
        os.makedirs(model_dir, exist_ok=True)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)

    def cached(key):
        if not cache_dir:
            return None
        path = os.path.join(cache_dir, key + ".ckpt")
        side = os.path.join(cache_dir, key + ".json")
        if os.path.exists(path) and os.path.exists(side):
            with open(side, encoding="utf-8") as f:
                return load_model(path), json.load(f)
        return None

    def store(key, model, info):
        if cache_dir:
            save_model(model, os.path.join(cache_dir, key + ".ckpt"))
            with open(os.path.join(cache_dir, key + ".json"), "w", encoding="utf-8") as f:
                json.dump(info, f, sort_keys=True)

    for e in training_order(cfg.roster):
        if e.kind == "epoch-snapshot-of":
            continue  # produced while its parent trains
        key = _cache_key(cfg, e, init_seed)
        hit = cached(key)
        snap_keys = {ep: _cache_key(cfg, by_id[sid], init_seed) for ep, sid in snaps.get(e.id, {}).items()}
        snap_hits = {ep: cached(k) for ep, k in snap_keys.items()}
        if hit is not None and all(v is not None for v in snap_hits.values()):
            model, info = hit
            models[e.id], meta[e.id] = model, info
            for ep, sid in snaps.get(e.id, {}).items():
                models[sid], meta[sid] = snap_hits[ep]
            continue
        model = build_architecture(e.preset, train.input_shape, train.num_classes, seed=init_seed[e.id])
        init_hash = hashlib.sha256(b"".join(p.astype("<f4").tobytes() for p in model.flat_params())).hexdigest()
        taken: dict[int, Network] = {}
        if 0 in snaps.get(e.id, {}):
            taken[0] = model.copy()

        def on_epoch_end(epoch, m, _want=snaps.get(e.id, {})):
            if epoch in _want:
                taken[epoch] = m.copy()

        hist = fit(model, train, _train_cfg(cfg, e.seed), test=test, on_epoch_end=on_epoch_end)
        info = {"id": e.id, "preset": e.preset, "seed": e.seed, "role": e.role, "lineage": e.lineage,
                "init_seed": init_seed[e.id], "init_sha256": init_hash, "epochs": cfg.train.epochs,
                "history": hist.to_dict()}
        models[e.id], meta[e.id] = model, info
        store(key, model, info)
        for ep, sid in snaps.get(e.id, {}).items():
            s = by_id[sid]
            snap = taken[ep]
            sinfo = {"id": sid, "preset": s.preset, "seed": s.seed, "role": s.role, "lineage": s.lineage,
                     "parent": e.id, "epoch": ep, "init_sha256": init_hash}
            models[sid], meta[sid] = snap, sinfo
            store(snap_keys[ep], snap, sinfo)
    if model_dir:
        for e in cfg.roster:
            path = os.path.join(model_dir, f"{e.id}.ckpt")
            save_model(models[e.id], path)
            side = os.path.join(model_dir, f"{e.id}.json")
            write_text(side, json.dumps(meta[e.id], indent=1, sort_keys=True) + "\n")
            files += [path, side]
    return Roster(models, meta, files)


# -- outputs ----------------------------------------------------------------------


def write_text(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def write_csv(path: str, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt_float(v) if isinstance(v, float) else v for v in r])
    return write_text(path, buf.getvalue())


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


DIST_COLUMNS = ["f1_id", "f2_id", "dist", "n_images", "capped_f1", "capped_f2"]
ENSEMBLE_COLUMNS = ["method", "same", "different", "unfooled", "source_unfooled", "n"]


def eligible_for(cfg: ExperimentConfig, roster: Roster, f1: str, f2: str, data: LabeledDataset, spec: AttackSpec, sample_n=None, seed=None) -> EligibleSet:
    correct_by = list(roster.models.values()) if cfg.eval.correct_by == "roster" else None
    return build_eligible_set(
        roster[f1], roster[f2], data, spec,
        sample_n=min(sample_n or cfg.eval.sample_n, len(data)),
        seed=cfg.eval.seed if seed is None else seed, correct_by=correct_by,
    )


def run_transfer(cfg, roster, test) -> list:
    reports = []
    for spec in cfg.attacks:
        for f1, f2 in cfg.transfer_pairs():
            el = eligible_for(cfg, roster, f1, f2, test, spec)
            reports.append(transfer_report(roster[f2], el, spec, f1, f2, test.name))
    return reports


def run_dist(cfg, roster, test) -> list[list]:
    rows = []
    for f1, f2 in cfg.transfer_pairs():
        ok = both_correct_indices([roster[f1], roster[f2]], test.images, test.labels)
        rng = np.random.default_rng(cfg.eval.seed)
        idx = np.sort(rng.permutation(ok)[: cfg.eval.dist_images])
        md = model_distance(roster[f1], roster[f2], test.images[idx], test.labels[idx], cfg.eval.dist_cap, cfg.eval.dist_tol)
        rows.append([f1, f2, md.dist, len(idx), md.capped1, md.capped2])
    return rows


def run_grids(cfg, roster, test, out_dir) -> list[str]:
    g = cfg.grid
    files = []
    gdir = os.path.join(out_dir, "grids")
    os.makedirs(gdir, exist_ok=True)
    spec = AttackSpec("PGD", g.epsilon)
    for f1, f2 in g.pairs:
        el = eligible_for(cfg, roster, f1, f2, test, spec, sample_n=max(4 * g.images, 50), seed=g.seed)
        for k in range(min(g.images, len(el))):
            x, y, i = el.x[k], int(el.y[k]), int(el.index[k])
            dirs = DirectionPair.from_gradient(roster[f1], x, y, seed=g.seed + i)
            g1 = boundary_grid(roster[f1], x, dirs, g.half_extent, g.resolution, f1, str(i))
            g2 = boundary_grid(roster[f2], x, dirs, g.half_extent, g.resolution, f2, str(i))
            d = boundary_distance(roster[f1], x, y, dirs.delta1 / dirs.unit_norm, cap=g.half_extent * dirs.unit_norm)
            g1.meta.update({"true_label": y, "boundary_distance": d.d, "boundary_capped": d.capped})
            ov = outcome_overlay(g1, g2, y)
            stem = os.path.join(gdir, f"{f1}_{f2}_img{i}")
            files += save_grid(g1, stem + f"_{f1}") + save_grid(g2, stem + f"_{f2}") + save_grid(ov, stem + "_overlay")
    return files


def run_nonrobust(cfg, train, test, roster, out_dir) -> tuple[dict, list[str]]:
    nc = cfg.nonrobust
    spec = NonRobustBuildSpec(
        f1_id=nc.f1, f2_id=nc.f2, replication=nc.replication, seed=nc.seed,
        attack=AttackSpec("PGD", nc.epsilon, steps=nc.steps, step_size=nc.step_size, objective="ntargeted"),
    )
    src = train.subset(np.arange(min(nc.train_count or len(train), len(train))))
    d1, d2, stats = build_nonrobust_sets(src, roster[nc.f1], roster[nc.f2], spec)
    files = []
    ndir = os.path.join(out_dir, "nonrobust")
    os.makedirs(ndir, exist_ok=True)
    if nc.save_datasets:
        files += d1.save(ndir) + d2.save(ndir)
    results = []
    for arch in nc.retrain:
        for ds in (d1, d2):
            r = retrain_and_eval(ds, arch, _train_cfg(cfg, nc.seed), test, init_seed=nc.seed)
            results.append(r.to_dict())
        if nc.control:
            ctrl = random_label_control(d1, nc.seed, test.num_classes)
            r = retrain_and_eval(ctrl, arch, _train_cfg(cfg, nc.seed), test, init_seed=nc.seed)
            results.append(r.to_dict() | {"variant": "random"})
    summary = {"success": stats.to_dict(), "retrain": results, "n_items": len(d1)}
    rows = [[r["arch"], r["variant"], r["test_accuracy"], r["train_accuracy"]] for r in results]
    files.append(write_csv(os.path.join(ndir, "retrain.csv"), ["arch", "variant", "test_accuracy", "train_accuracy"], rows))
    files.append(write_text(os.path.join(ndir, "summary.json"), json.dumps(summary, indent=1, sort_keys=True) + "\n"))
    return summary, files


def ensemble_compare(
    source: Network,
    added: list[Network],
    heldout: Network,
    data: LabeledDataset,
    spec: AttackSpec,
    sample_n: int = 1000,
    seed: int = 0,
) -> dict[str, dict]:
    """Targeted attack on the source alone vs on source + added models, both
    scored on the held-out model. Images are ones every involved model gets
    right; targets are shared between the two methods."""
    every = [source, heldout] + list(added)
    ok = both_correct_indices(every, data.images, data.labels)
    idx = np.sort(np.random.default_rng(seed).permutation(ok)[:sample_n])
    x, y = data.images[idx], data.labels[idx]
    tgt = sample_target_classes(y, source.num_classes, spec.seed)
    tspec = AttackSpec(spec.family, spec.epsilon, spec.steps, spec.step_size, "targeted", spec.momentum_decay, spec.seed)
    out = {}
    for name, models in (("vanilla", [source]), ("ensemble", [source] + list(added))):
        adv = ensemble_targeted(models, x, tgt, tspec) if len(models) > 1 else attack(source, x, tgt, tspec)
        p1 = source.predict(adv)
        p2 = heldout.predict(adv)
        fooled = p1 != y
        counts = np.bincount(classify_outcome(p2[fooled], y[fooled], p1[fooled]), minlength=3)
        out[name] = {
            "same": int(counts[Outcome.SAME_MISTAKE]),
            "different": int(counts[Outcome.DIFFERENT_MISTAKE]),
            "unfooled": int(counts[Outcome.UNFOOLED]),
            "source_unfooled": int((~fooled).sum()),
            "n": int(len(y)),
        }
    return out


@dataclass
class Bundle:
    out_dir: str
    reports: list = field(default_factory=list)
    dist_rows: list = field(default_factory=list)
    nonrobust: dict | None = None
    ensemble: dict | None = None
    tasks: list[dict] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    roster: Roster | None = None

    @property
    def ok(self) -> bool:
        return all(t["status"] == "ok" for t in self.tasks)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | None = None,
    roster: Roster | None = None,
    data: tuple[LabeledDataset, LabeledDataset] | None = None,
    cache_dir: str | None = None,
) -> Bundle:
    """Run every configured task. A failing task is recorded in the manifest
    and the remaining tasks still run."""
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    b = Bundle(out_dir)
    rdir = os.path.join(out_dir, "reports")
    os.makedirs(rdir, exist_ok=True)

    def task(name, fn):
        try:
            fn()
            b.tasks.append({"task": name, "status": "ok"})
        except Exception as exc:  # recorded, bundle continues
            log.error("task %s failed: %s", name, exc)
            b.tasks.append({"task": name, "status": "error", "error": f"{type(exc).__name__}: {exc}",
                            "traceback": traceback.format_exc(limit=3)})

    train, test = data if data is not None else load_datasets(cfg.dataset)
    if cfg.dataset.source == "synthetic":
        ddir = os.path.join(out_dir, "data")
        os.makedirs(ddir, exist_ok=True)
        paths = [os.path.join(ddir, n) for n in ("train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx")]
        write_idx(paths[0], paths[1], train)
        write_idx(paths[2], paths[3], test)
        b.files += paths

    def do_roster():
        b.roster = roster if roster is not None else prepare_roster(cfg, train, test, out_dir, cache_dir)
        b.files.extend(b.roster.files)

    task("roster", do_roster)
    if b.roster is None:
        return _finish(cfg, b)

    def do_transfer():
        b.reports = run_transfer(cfg, b.roster, test)
        b.files.append(write_text(os.path.join(rdir, "transfer.csv"), reports_to_csv(b.reports)))
        b.files.append(write_text(os.path.join(rdir, "transfer.json"),
                                  json.dumps([r.to_dict() for r in b.reports], indent=1, sort_keys=True) + "\n"))

    def do_dist():
        b.dist_rows = run_dist(cfg, b.roster, test)
        b.files.append(write_csv(os.path.join(rdir, "dist.csv"), DIST_COLUMNS, b.dist_rows))

    def do_grids():
        b.files.extend(run_grids(cfg, b.roster, test, out_dir))

    def do_nonrobust():
        b.nonrobust, files = run_nonrobust(cfg, train, test, b.roster, out_dir)
        b.files.extend(files)

    def do_ensemble():
        ec = cfg.ensemble
        spec = AttackSpec("PGD", ec.epsilon, steps=ec.steps, objective="targeted", seed=ec.seed)
        b.ensemble = ensemble_compare(b.roster[ec.source], [b.roster[a] for a in ec.added], b.roster[ec.heldout],
                                      test, spec, ec.sample_n, ec.seed)
        rows = [[k] + [v[c] for c in ENSEMBLE_COLUMNS[1:]] for k, v in b.ensemble.items()]
        b.files.append(write_csv(os.path.join(rdir, "ensemble.csv"), ENSEMBLE_COLUMNS, rows))

    task("transfer", do_transfer)
    if cfg.eval.dist_images > 0:
        task("dist", do_dist)
    if cfg.grid.images > 0 and cfg.grid.pairs:
        task("grids", do_grids)
    if cfg.nonrobust.enabled:
        task("nonrobust", do_nonrobust)
    if cfg.ensemble.enabled:
        task("ensemble", do_ensemble)
    return _finish(cfg, b)


def _finish(cfg: ExperimentConfig, b: Bundle) -> Bundle:
    write_text(os.path.join(b.out_dir, "config.txt"), "".join(f"{k} = {v}\n" for k, v in cfg.raw.items()))
    files = sorted(set(b.files) | {os.path.join(b.out_dir, "config.txt")})
    manifest = {
        "config_sha256": cfg.config_hash(),
        "seed": cfg.seed,
        "seeds": {"eval": cfg.eval.seed, "train": cfg.train.seed, "grid": cfg.grid.seed,
                  "nonrobust": cfg.nonrobust.seed, "ensemble": cfg.ensemble.seed,
                  "roster": {e.id: e.seed for e in cfg.roster}},
        "tasks": b.tasks,
        "complete": b.ok,
        "files": [{"path": os.path.relpath(p, b.out_dir).replace(os.sep, "/"), "sha256": sha256_file(p),
                   "bytes": os.path.getsize(p)} for p in files],
        "attacks": [a.to_dict() for a in cfg.attacks],
    }
    b.files = files
    write_text(os.path.join(b.out_dir, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return b


def verify_manifest(out_dir: str) -> list[str]:
    """Paths whose content no longer matches the manifest hash."""
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as f:
        man = json.load(f)
    bad = []
    for item in man["files"]:
        p = os.path.join(out_dir, item["path"])
        if not os.path.exists(p) or sha256_file(p) != item["sha256"]:
            bad.append(item["path"])
    return bad
