import math

import numpy as np
import pytest

from helpers import linear_model
from transferlab.attacks import AttackSpec
from transferlab.data import LabeledDataset
from transferlab.nn import OptimizerConfig
from transferlab.nonrobust import (
    NonRobustBuildSpec,
    NonRobustDataset,
    Provenance,
    build_nonrobust_sets,
    random_label_control,
    retrain_and_eval,
    success_breakdown,
)

C = 10
SPEC = NonRobustBuildSpec("A", "F", AttackSpec("PGD", 2.0, steps=20, step_size=0.2, objective="ntargeted"), seed=0)


def _models():
    rng = np.random.default_rng(11)
    return (linear_model(rng.standard_normal((6, C)), rng.standard_normal(C)),
            linear_model(rng.standard_normal((6, C)), rng.standard_normal(C)))


def _data(n, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.random((n, 6)), rng.integers(0, C, n), C, "toy")


@pytest.fixture(scope="module")
def built():
    f1, f2 = _models()
    data = _data(3000)
    return (f1, f2, data) + build_nonrobust_sets(data, f1, f2, SPEC)


def test_datasets_share_images(built):
    _, _, data, d1, d2, _ = built
    assert d1.images is d2.images
    assert len(d1) == len(d2) == len(data)
    assert (d1.labels == d1.provenance.y1_target).all() and (d2.labels == d2.provenance.y2_target).all()


def test_target_independence(built):
    _, _, _, d1, _, stats = built
    p = d1.provenance
    same = (p.y1_target == p.y2_target).mean()
    assert abs(same - 1 / (C - 1)) <= 3 * math.sqrt((1 / 9) * (8 / 9) / len(p.y1_target))
    assert stats.same_target_rate == same


def test_provenance_and_norm_bound(built):
    _, _, data, d1, d2, _ = built
    d1.verify(data)
    d2.verify(data)
    p = d1.provenance
    assert (p.y1_target != p.true_label).all() and (p.y2_target != p.true_label).all()
    assert (p.distance <= 2.0 + 1e-9).all()


def test_recount_oracle(built):
    f1, f2, _, d1, _, stats = built
    p = d1.provenance
    h1 = f1.predict(d1.images) == p.y1_target
    h2 = f2.predict(d1.images) == p.y2_target
    assert np.array_equal(h1, p.f1_hit) and np.array_equal(h2, p.f2_hit)
    assert stats.f1_rate == h1.mean() and stats.f2_rate == h2.mean() and stats.joint_rate == (h1 & h2).mean()
    assert stats.joint_rate <= min(stats.f1_rate, stats.f2_rate)
    assert stats.n == 3000


def test_identical_models_and_targets_give_equal_rates():
    hits = np.array([True, False, True, True])
    p = Provenance(np.arange(4), np.zeros(4, int), np.ones(4, int), np.ones(4, int), hits, hits.copy(), np.zeros(4))
    s = success_breakdown(p)
    assert s.f1_rate == s.f2_rate == s.joint_rate == 0.75 and s.same_target_rate == 1.0


def test_empty_breakdown():
    e = np.zeros(0)
    s = success_breakdown(Provenance(e.astype(int), e.astype(int), e.astype(int), e.astype(int), e.astype(bool), e.astype(bool), e))
    assert s.n == 0 and math.isnan(s.joint_rate)


def test_replication():
    f1, f2 = _models()
    data = _data(50)
    spec = NonRobustBuildSpec("A", "F", SPEC.attack, replication=3, seed=2)
    d1, _, stats = build_nonrobust_sets(data, f1, f2, spec)
    assert len(d1) == 150 and stats.n == 150
    assert d1.provenance.source_index.tolist() == list(range(50)) * 3
    assert not np.array_equal(d1.provenance.y1_target[:50], d1.provenance.y1_target[50:100])
    d1.verify(data)


def test_build_is_deterministic():
    f1, f2 = _models()
    data = _data(40)
    a = build_nonrobust_sets(data, f1, f2, SPEC)[0]
    b = build_nonrobust_sets(data, f1, f2, SPEC)[0]
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_spec_validation():
    with pytest.raises(ValueError):
        NonRobustBuildSpec(replication=0)
    with pytest.raises(ValueError):
        NonRobustBuildSpec(attack=AttackSpec("PGD", 2.0, objective="targeted"))


def test_file_stem(built):
    _, _, _, d1, d2, _ = built
    assert d1.file_stem() == "nonrobust_A_F_Y1_eps2_seed0"
    assert d2.file_stem() == "nonrobust_A_F_Y2_eps2_seed0"


def test_save_load_round_trip_and_tampering(built, tmp_path):
    _, _, data, d1, _, _ = built
    small = d1.filtered("f1")
    small = NonRobustDataset(small.images[:30], "Y1", small.provenance.subset(slice(0, 30)), small.epsilon, small.meta)
    paths = small.save(tmp_path)
    stem = paths[0][: -len("-images.idx")]
    back = NonRobustDataset.load(stem, data)
    assert np.array_equal(back.images, small.images) and np.array_equal(back.labels, small.labels)
    assert back.meta == small.meta and back.variant == "Y1"

    raw = bytearray(open(paths[1], "rb").read())
    raw[-1] = (small.labels[-1] + 1) % C
    open(paths[1], "wb").write(bytes(raw))
    with pytest.raises(ValueError, match="label file"):
        NonRobustDataset.load(stem, data)


def test_verify_detects_moved_images(built):
    _, _, data, d1, _, _ = built
    p = d1.provenance.subset(slice(0, 5))
    NonRobustDataset(d1.images[:5], "Y1", p, 2.0).verify(data)
    p.source_index = (p.source_index + 1) % len(data)
    with pytest.raises(ValueError):
        NonRobustDataset(d1.images[:5], "Y1", p, 0.01).verify(data)
    bad = d1.provenance.subset(slice(0, 5))
    bad.y1_target = bad.true_label.copy()
    with pytest.raises(ValueError, match="true label"):
        NonRobustDataset(d1.images[:5], "Y1", bad, 2.0).verify()


def test_filtered_variants(built):
    _, _, _, d1, _, stats = built
    both = d1.filtered("both")
    assert len(both) == round(stats.joint_rate * len(d1))
    assert both.provenance.f1_hit.all() and both.provenance.f2_hit.all()


def test_random_label_control(built):
    _, _, _, d1, _, _ = built
    ctl = random_label_control(d1, seed=1, num_classes=C)
    assert ctl.images is d1.images or np.array_equal(ctl.images, d1.images)
    assert ctl.labels.min() >= 0 and ctl.labels.max() < C
    assert abs((ctl.labels == d1.labels).mean() - 1 / C) <= 3 * math.sqrt(0.09 / len(ctl))


def test_retrain_and_eval_reports_final_epoch():
    rng = np.random.default_rng(0)
    y = np.arange(400) % 2
    x = np.clip(np.array([[0.2, 0.2], [0.8, 0.8]])[y] + rng.normal(0, 0.05, (400, 2)), 0, 1)
    train = LabeledDataset(x[:300], y[:300], 2, "tr")
    test = LabeledDataset(x[300:], y[300:], 2, "te")
    cfg = OptimizerConfig(learning_rate=0.1, epochs=5, batch_size=20, lr_decay_epochs=[], seed=0)
    res = retrain_and_eval(train, ["dense(2,8)", "relu", "dense(8,2)"], cfg, test)
    assert res.test_accuracy >= 0.99
    assert res.train_accuracy == res.history["train_acc"][-1]
    assert res.to_dict()["variant"] == "tr"
