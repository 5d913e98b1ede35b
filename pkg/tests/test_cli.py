import json
import os
import subprocess
import sys

import pytest

from transferlab.cli import main

CONFIG = """\
seed = 0
dataset.source = synthetic
dataset.synthetic.input_shape = 1x8x8
dataset.synthetic.train_count = 400
dataset.synthetic.test_count = 100
train.epochs = 10
train.learning_rate = 0.05
train.lr_decay_epochs = 8
train.batch_size = 20
roster.A.preset = FC-2
roster.A.seed = 1
roster.A.role = source
roster.B.preset = FC-4
roster.B.seed = 2
roster.C.preset = FC-2
roster.C.seed = 3
attack.p.family = PGD
attack.p.epsilon = 1.0
eval.sample_n = 50
eval.dist_images = 10
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.txt"
    cfg.write_text(CONFIG)
    out = d / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["dist", "--f1", "A"])
    assert e.value.code == 1
    assert main(["run"]) == 1


def test_subprocess_exit_codes(tmp_path):
    def run(*args):
        return subprocess.run([sys.executable, "-m", "transferlab.cli", *args], capture_output=True, text=True).returncode

    assert run("no-such-command") == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("roster.A.preset = FC-9\n")
    assert run("run", "--config", str(bad)) == 2


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.txt")]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("roster.A.lineage = same-init-as:Z\n")
    assert main(["run", "--config", str(bad)]) == 2
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(CONFIG)
    assert main(["dist", "--config", str(cfg), "--out", str(tmp_path), "--f1", "nope", "--f2", "nope"]) == 2
    garbage = tmp_path / "g.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path), "--model", str(garbage)]) == 2
    assert "data error" in capsys.readouterr().err


def test_numerical_failure_exits_3(workdir, tmp_path):
    from transferlab.nn import build_architecture, save_model

    cfg, _ = workdir
    m = build_architecture("FC-2", (1, 8, 8), 10, seed=0)
    for a in m.flat_params():
        a[...] = 0.0
    save_model(m, str(tmp_path / "flat.ckpt"))
    # constant logits: zero loss gradient, so no gradient direction exists
    f = str(tmp_path / "flat.ckpt")
    assert main(["dist", "--config", str(cfg), "--out", str(tmp_path), "--f1", f, "--f2", f, "--n-images", "5"]) == 3


def test_global_flags_after_subcommand(tmp_path, capsys):
    assert main(["theory-sim", "--d", "10", "--eta", "0.3", "--n", "1000", "--out", str(tmp_path), "--seed", "4"]) == 0
    text = (tmp_path / "theory_sweep.csv").read_text()
    assert text.splitlines()[0].startswith("scheme,d,eta,perturbed")
    assert len(text.splitlines()) == 7 and text.splitlines()[1].endswith(",1000,4")


def test_model_commands(workdir, capsys):
    cfg, out = workdir
    base = ["--config", str(cfg), "--out", str(out)]
    assert (out / "models" / "A.ckpt").exists() and (out / "models" / "B.json").exists()

    capsys.readouterr()
    assert main(["attack", *base, "--model", "A", "--n", "20", "--epsilon", "0.5"]) == 0
    assert _json_out(capsys)["feasible"] is True

    assert main(["transfer-eval", *base, "--f1", "A", "--f2", "B", "--sample-n", "50"]) == 0
    rep = _json_out(capsys)
    assert rep["unfooled"] + rep["different"] + rep["same"] == rep["n_eligible"]
    assert (out / "transfer_A_B.csv").exists()

    assert main(["dist", *base, "--f1", "A", "--f2", "A", "--n-images", "10"]) == 0
    assert _json_out(capsys)["dist"] == 0.0

    assert main(["boundary-grid", *base, "--f1", "A", "--f2", "B", "--resolution", "11", "--half-extent", "5"]) == 0
    assert all(os.path.exists(f) for f in _json_out(capsys)["files"])

    assert main(["ensemble-compare", *base, "--source", "A", "--added", "C", "--heldout", "B", "--sample-n", "30"]) == 0
    res = _json_out(capsys)
    assert set(res) == {"vanilla", "ensemble"} and res["vanilla"]["n"] == 30
    for v in res.values():
        assert v["same"] + v["different"] + v["unfooled"] + v["source_unfooled"] == 30


def test_nonrobust_commands(workdir, capsys):
    cfg, out = workdir
    base = ["--config", str(cfg), "--out", str(out)]
    capsys.readouterr()
    assert main(["nonrobust-build", *base, "--f1", "A", "--f2", "B", "--steps", "5", "--train-count", "60"]) == 0
    built = _json_out(capsys)
    assert built["success"]["n"] == 60
    stem = built["files"][0][: -len("-images.idx")]
    assert main(["nonrobust-train", *base, "--data", stem, "--arch", "FC-2", "--epochs", "1"]) == 0
    r = _json_out(capsys)
    assert r["variant"] == "Y1" and 0.0 <= r["test_accuracy"] <= 1.0


def test_run_writes_bundle(workdir, tmp_path, capsys):
    cfg, _ = workdir
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    summary = _json_out(capsys)
    assert all(t["status"] == "ok" for t in summary["tasks"])
    assert json.loads((tmp_path / "manifest.json").read_text())["complete"]
