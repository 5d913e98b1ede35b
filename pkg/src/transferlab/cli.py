"""Command-line entry point: ``transferlab <subcommand> [options]``.

Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("transferlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _set_threads(n: int | None) -> None:
    if not n:
        return
    if "numpy" in sys.modules:
        log.warning("--threads has no effect once numpy is loaded")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _add_attack_args(p, objective="nontargeted", epsilon=1.0):
    p.add_argument("--family", default="PGD", choices=["FGM", "PGD", "MIM"])
    p.add_argument("--epsilon", type=float, default=epsilon)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--objective", default=objective, choices=["nontargeted", "targeted", "ntargeted"])
    p.add_argument("--momentum-decay", type=float, default=1.0)


def _global_flags(p, default):
    p.add_argument("--config", default=default, help="flat key=value experiment config")
    p.add_argument("--seed", type=int, default=default, help="overrides the config seed")
    p.add_argument("--out", default=default, help="output directory (default: config 'out' or ./out)")
    p.add_argument("--threads", type=int, default=default, help="BLAS/OpenMP thread count")
    p.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="transferlab", description="Class-aware adversarial transferability lab.")
    _global_flags(p, argparse.SUPPRESS)
    p.set_defaults(config=None, seed=None, out=None, threads=None, verbose=False)
    # flags are accepted before or after the subcommand; SUPPRESS keeps the
    # subparser from overwriting a value given before it
    common = _Parser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", parents=[common], help="train roster models (or one ad-hoc model)")
    s.add_argument("--models", nargs="*", help="roster ids to keep (default: all)")
    s.add_argument("--arch", help="ad-hoc preset; skips the roster")
    s.add_argument("--id", default="model")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("attack", parents=[common], help="attack test images on one model")
    s.add_argument("--model", required=True, help="checkpoint path or roster id")
    s.add_argument("--n", type=int, default=100)
    _add_attack_args(s)

    s = sub.add_parser("transfer-eval", parents=[common], help="class-aware transfer report for one pair")
    s.add_argument("--f1", required=True)
    s.add_argument("--f2", required=True)
    s.add_argument("--sample-n", type=int, default=2000)
    _add_attack_args(s)

    s = sub.add_parser("dist", parents=[common], help="Dist(F1, F2) along F1's gradient directions")
    s.add_argument("--f1", required=True)
    s.add_argument("--f2", required=True)
    s.add_argument("--n-images", type=int, default=1000)
    s.add_argument("--cap", type=float, default=2.0)

    s = sub.add_parser("boundary-grid", parents=[common], help="2-D label grids around eligible images")
    s.add_argument("--f1", required=True)
    s.add_argument("--f2", required=True)
    s.add_argument("--images", type=int, default=1)
    s.add_argument("--half-extent", type=int, default=30)
    s.add_argument("--resolution", type=int, default=61)

    s = sub.add_parser("nonrobust-build", parents=[common], help="build relabeled N-targeted datasets")
    s.add_argument("--f1", required=True)
    s.add_argument("--f2", required=True)
    s.add_argument("--epsilon", type=float, default=2.0)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--step-size", type=float, default=0.1)
    s.add_argument("--replication", type=int, default=1)
    s.add_argument("--train-count", type=int, default=0)

    s = sub.add_parser("nonrobust-train", parents=[common], help="retrain a fresh model on a saved non-robust set")
    s.add_argument("--data", required=True, help="dataset stem written by nonrobust-build")
    s.add_argument("--arch", default="Conv-2")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("ensemble-compare", parents=[common], help="vanilla vs ensemble targeted attack")
    s.add_argument("--source", required=True)
    s.add_argument("--added", nargs="+", required=True)
    s.add_argument("--heldout", required=True)
    s.add_argument("--epsilon", type=float, default=1.0)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--sample-n", type=int, default=1000)

    s = sub.add_parser("theory-sim", parents=[common], help="closed form vs Monte Carlo for the linear model")
    s.add_argument("--d", type=int, nargs="+", default=[10, 100, 1000])
    s.add_argument("--eta", type=float, nargs="+", default=[0.05, 0.11, 0.3])
    s.add_argument("--n", type=int, default=100_000)

    sub.add_parser("run", parents=[common], help="run the full experiment described by --config")
    return p


def _load_cfg(args):
    from .config import ExperimentConfig, load_config, parse_config

    cfg = load_config(args.config) if args.config else parse_config("")
    if args.seed is not None:
        cfg.raw["seed"] = str(args.seed)
        cfg = parse_config("".join(f"{k} = {v}\n" for k, v in cfg.raw.items()))
    if args.out:
        cfg.out = args.out
    return cfg


def _resolve_model(ref: str, out: str):
    from .nn import load_model

    path = ref if os.path.exists(ref) else os.path.join(out, "models", f"{ref}.ckpt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint at {ref!r} or {path!r}")
    return load_model(path), os.path.splitext(os.path.basename(path))[0]


def _attack_spec(args, seed):
    from .attacks import AttackSpec

    return AttackSpec(args.family, args.epsilon, args.steps, args.step_size, args.objective, args.momentum_decay, seed)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _run(args) -> int:
    from . import harness
    from .metrics import reports_to_csv

    cmd = args.command
    if cmd == "run" and not args.config:
        raise UsageError("run needs --config")
    cfg = _load_cfg(args)
    out = cfg.out
    os.makedirs(out, exist_ok=True)

    if cmd == "run":
        b = harness.run_experiment(cfg, out)
        _emit({"out": out, "tasks": b.tasks, "files": len(b.files)})
        if not b.ok:
            numeric = any(t.get("error", "").startswith(("FloatingPointError", "DirectionError")) for t in b.tasks)
            return EXIT_NUMERIC if numeric else EXIT_DATA
        return EXIT_OK

    if cmd == "theory-sim":
        from .theory import sweep, sweep_csv

        rows = sweep(tuple(args.d), tuple(args.eta), n=args.n, seed=cfg.seed)
        text = sweep_csv(rows)
        harness.write_text(os.path.join(out, "theory_sweep.csv"), text)
        sys.stdout.write(text)
        return EXIT_OK

    train, test = harness.load_datasets(cfg.dataset)

    if cmd == "train":
        from .config import RosterEntry
        from .nn import OptimizerConfig

        if args.epochs is not None:
            cfg.train = OptimizerConfig(**(cfg.train.to_dict() | {"epochs": args.epochs}))
        if args.arch:
            cfg.roster = [RosterEntry(args.id, args.arch, cfg.seed, "source")]
        elif args.models:
            keep = set(args.models)
            for e in cfg.roster:
                if e.id in keep and e.parent and e.parent not in keep:
                    keep.add(e.parent)
            cfg.roster = [e for e in cfg.roster if e.id in keep]
        if not cfg.roster:
            raise UsageError("nothing to train: give --arch or a config with a roster")
        r = harness.prepare_roster(cfg, train, test, out)
        _emit({e: {"test_acc": (m.get("history") or {}).get("test_acc", [None])[-1]} for e, m in r.meta.items()})
        return EXIT_OK

    if cmd == "attack":
        from .attacks import AdversarialBatch, attack

        model, mid = _resolve_model(args.model, out)
        spec = _attack_spec(args, cfg.seed)
        if spec.objective == "ntargeted":
            raise UsageError("attack runs a single model; use nonrobust-build for N-targeted")
        x, y = test.images[: args.n], test.labels[: args.n]
        targets = []
        labels = y
        if spec.objective == "targeted":
            from .attacks import sample_target_classes

            labels = sample_target_classes(y, model.num_classes, cfg.seed)
            targets = [labels]
        adv = attack(model, x, labels, spec)
        batch = AdversarialBatch(x, adv, y, spec, targets, {mid: model.predict(adv)})
        stem = os.path.join(out, f"adv_{mid}_{spec.family}_{spec.objective}_eps{spec.epsilon:g}")
        batch.save(stem)
        _emit({"saved": stem, "feasible": batch.check_feasible(), "fooled": float((batch.source_predictions[mid] != y).mean())})
        return EXIT_OK

    if cmd == "transfer-eval":
        f1, id1 = _resolve_model(args.f1, out)
        f2, id2 = _resolve_model(args.f2, out)
        spec = _attack_spec(args, cfg.seed)
        from .metrics import build_eligible_set, transfer_report

        el = build_eligible_set(f1, f2, test, spec, sample_n=min(args.sample_n, len(test)), seed=cfg.seed)
        rep = transfer_report(f2, el, spec, id1, id2, test.name)
        harness.write_text(os.path.join(out, f"transfer_{id1}_{id2}.csv"), reports_to_csv([rep]))
        harness.write_text(os.path.join(out, f"transfer_{id1}_{id2}.json"), rep.to_json() + "\n")
        _emit(rep.to_dict() | {"different_pairs": len(rep.pairs)})
        return EXIT_OK

    if cmd == "dist":
        from .geometry import model_distance
        from .metrics import both_correct_indices
        import numpy as np

        f1, id1 = _resolve_model(args.f1, out)
        f2, id2 = _resolve_model(args.f2, out)
        ok = both_correct_indices([f1, f2], test.images, test.labels)
        idx = np.sort(np.random.default_rng(cfg.seed).permutation(ok)[: args.n_images])
        md = model_distance(f1, f2, test.images[idx], test.labels[idx], cap=args.cap)
        harness.write_csv(os.path.join(out, f"dist_{id1}_{id2}.csv"), harness.DIST_COLUMNS,
                          [[id1, id2, md.dist, len(idx), md.capped1, md.capped2]])
        _emit({"f1": id1, "f2": id2} | md.to_dict())
        return EXIT_OK

    if cmd == "boundary-grid":
        f1, id1 = _resolve_model(args.f1, out)
        f2, id2 = _resolve_model(args.f2, out)
        cfg.grid.images, cfg.grid.half_extent, cfg.grid.resolution = args.images, args.half_extent, args.resolution
        cfg.grid.pairs, cfg.grid.seed = [(id1, id2)], cfg.seed
        files = harness.run_grids(cfg, harness.Roster({id1: f1, id2: f2}, {}), test, out)
        _emit({"files": files})
        return EXIT_OK

    if cmd == "nonrobust-build":
        from .attacks import AttackSpec
        from .nonrobust import NonRobustBuildSpec, build_nonrobust_sets
        import numpy as np

        f1, id1 = _resolve_model(args.f1, out)
        f2, id2 = _resolve_model(args.f2, out)
        spec = NonRobustBuildSpec(id1, id2, AttackSpec("PGD", args.epsilon, args.steps, args.step_size, "ntargeted"),
                                  args.replication, cfg.seed)
        src = train.subset(np.arange(min(args.train_count or len(train), len(train))))
        d1, d2, stats = build_nonrobust_sets(src, f1, f2, spec)
        files = d1.save(out) + d2.save(out)
        _emit({"files": files, "success": stats.to_dict()})
        return EXIT_OK

    if cmd == "nonrobust-train":
        from .nn import OptimizerConfig
        from .nonrobust import NonRobustDataset, retrain_and_eval

        stem = args.data[: -len(".json")] if args.data.endswith(".json") else args.data
        ds = NonRobustDataset.load(stem, train)
        if args.epochs is not None:
            cfg.train = OptimizerConfig(**(cfg.train.to_dict() | {"epochs": args.epochs}))
        r = retrain_and_eval(ds, args.arch, cfg.train, test, init_seed=cfg.seed)
        _emit(r.to_dict())
        return EXIT_OK

    if cmd == "ensemble-compare":
        from .attacks import AttackSpec

        src, sid = _resolve_model(args.source, out)
        added = [_resolve_model(a, out)[0] for a in args.added]
        held, hid = _resolve_model(args.heldout, out)
        spec = AttackSpec("PGD", args.epsilon, steps=args.steps, objective="targeted", seed=cfg.seed)
        res = harness.ensemble_compare(src, added, held, test, spec, args.sample_n, cfg.seed)
        rows = [[k] + [v[c] for c in harness.ENSEMBLE_COLUMNS[1:]] for k, v in res.items()]
        harness.write_csv(os.path.join(out, f"ensemble_{sid}_{hid}.csv"), harness.ENSEMBLE_COLUMNS, rows)
        _emit(res)
        return EXIT_OK

    raise UsageError(f"unknown command {cmd!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _set_threads(args.threads)
    from .config import ConfigError
    from .data import DataFormatError
    from .geometry import DirectionError
    from .nn import CheckpointError, LabelError, ShapeError

    try:
        return _run(args)
    except UsageError as exc:
        print(f"transferlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, CheckpointError, ConfigError, FileNotFoundError, ShapeError, LabelError) as exc:
        print(f"transferlab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, DirectionError) as exc:
        print(f"transferlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"transferlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
