import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import finite_diff, linear_model, rel_err
from transferlab.data import LabeledDataset
from transferlab.nn import (
    SGD,
    CheckpointError,
    Conv2d,
    Dense,
    Dropout,
    LabelError,
    MaxPool2x2,
    OptimizerConfig,
    ReLU,
    ShapeError,
    build_architecture,
    fit,
    load_model,
    log_softmax,
    parse_layer,
    save_model,
    softmax,
)


# -- architecture ---------------------------------------------------------------


def test_fc2_preset_layers():
    m = build_architecture("FC-2", (1, 28, 28), 10)
    assert m.layers == [Dense(784, 500), ReLU(), Dense(500, 10)]


def test_fc4_preset_layers():
    m = build_architecture("FC-4")
    dims = [(l.in_features, l.out_features) for l in m.layers if isinstance(l, Dense)]
    assert dims == [(784, 500), (500, 200), (200, 100), (100, 10)]


def test_conv2_preset_matches_table():
    m = build_architecture("Conv-2")
    assert m.layers[:5] == [Conv2d(1, 32, 3, 1), ReLU(), Conv2d(32, 64, 3, 1), ReLU(), MaxPool2x2()]
    assert m.layers[5] == Dense(9216, 128)
    assert isinstance(m.layers[7], Dropout) and m.layers[7].rate == 0.5
    assert m.layers[8] == Dense(128, 10)


def test_conv4_valid_convolutions_flatten_2048():
    m = build_architecture("Conv-4")
    dense = [l for l in m.layers if isinstance(l, Dense)]
    assert dense[0].in_features == 128 * 4 * 4


def test_same_seed_bitwise_identical():
    a = build_architecture("FC-2", seed=7)
    b = build_architecture("FC-2", seed=7)
    for x, y in zip(a.flat_params(), b.flat_params()):
        assert np.array_equal(x, y)
    c = build_architecture("FC-2", seed=8)
    assert not np.array_equal(a.flat_params()[0], c.flat_params()[0])


def test_custom_spec_parameter_count():
    m = build_architecture([Dense(4, 3), ReLU(), Dense(3, 2)], input_shape=(4,), num_classes=2)
    assert m.num_params == 3 * 4 + 3 + 2 * 3 + 2 == 23


def test_unknown_preset_and_noncomposing_shapes():
    with pytest.raises(KeyError):
        build_architecture("ResNet-18")
    with pytest.raises(ShapeError):
        build_architecture(["dense(4,3)", "relu", "dense(5,2)"], input_shape=(4,), num_classes=2)
    with pytest.raises(ShapeError):
        build_architecture(["dense(4,3)"], input_shape=(4,), num_classes=2)


def test_layer_validation():
    with pytest.raises(ShapeError):
        Dense(0, 3)
    with pytest.raises(ShapeError):
        Dropout(1.0)
    with pytest.raises(ValueError):
        parse_layer("softmax")


@pytest.mark.parametrize("layer", [Dense(3, 4), Conv2d(2, 5, 3, 2), ReLU(), MaxPool2x2(), Dropout(0.25), parse_layer("flatten")])
def test_layer_token_round_trip(layer):
    assert parse_layer(layer.to_token()) == layer


# -- forward --------------------------------------------------------------------


def test_zero_final_layer_gives_zero_logits(rng):
    m = build_architecture("FC-2", (1, 6, 6), 4, seed=1)
    m.params[-1]["weight"][:] = 0
    assert np.array_equal(m.logits(rng.random((3, 1, 6, 6))), np.zeros((3, 4)))


def test_identity_dense():
    m = linear_model(np.eye(2))
    assert np.array_equal(m.logits(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_two_layer_net_matches_hand_matmul(rng):
    m = build_architecture(["dense(5,7)", "relu", "dense(7,3)"], input_shape=(5,), num_classes=3, seed=2)
    x = rng.standard_normal((4, 5))
    W1, b1 = m.params[0]["weight"], m.params[0]["bias"] + 0.1
    m.params[0]["bias"] = b1
    W2, b2 = m.params[2]["weight"], m.params[2]["bias"]
    h = np.maximum(x @ W1 + b1, 0)
    np.testing.assert_allclose(m.logits(x), h @ W2 + b2, rtol=0, atol=1e-12)


def test_conv_matches_direct_loop(rng):
    conv = Conv2d(2, 3, 3, 2)
    p = conv.init_params(rng)
    p["bias"] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 7, 8))
    out, _ = conv.forward(p, x)
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = x[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    ref[n, o, i, j] = (patch * p["weight"][o]).sum() + p["bias"][o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_shape_mismatch_raises(rng):
    m = build_architecture("FC-2", (1, 6, 6), 4)
    with pytest.raises(ShapeError):
        m.logits(rng.random((2, 1, 5, 5)))


def test_eval_mode_deterministic(rng):
    m = build_architecture("Conv-2", (1, 10, 10), 3, seed=0)
    x = rng.random((2, 1, 10, 10))
    assert np.array_equal(m.logits(x), m.logits(x))


def test_predict_argmax_and_ties():
    m = linear_model(np.zeros((1, 3)), [0.1, 0.9, 0.0])
    assert m.predict(np.zeros((1, 1)))[0] == 1
    tied = linear_model(np.zeros((1, 2)), [0.5, 0.5])
    assert tied.predict(np.zeros((1, 1)))[0] == 0


# -- loss and gradients ------------------------------------------------------------


def test_uniform_logits_loss_is_ln10():
    m = linear_model(np.zeros((3, 10)))
    g = m.loss_and_grads(np.ones((5, 3)), np.arange(5))
    assert g.loss == pytest.approx(math.log(10), abs=1e-12)
    assert g.loss == pytest.approx(2.302585, abs=1e-6)


def test_confident_logits_loss_to_zero():
    for margin in (10.0, 50.0, 700.0):
        m = linear_model(np.zeros((1, 3)), [margin, 0.0, 0.0])
        loss = m.loss_and_grads(np.zeros((1, 1)), np.array([0])).loss
        assert 0 <= loss < 3 * math.exp(-margin) + 1e-300


def test_invalid_labels():
    m = linear_model(np.zeros((2, 3)))
    with pytest.raises(LabelError):
        m.loss_and_grads(np.zeros((2, 2)), np.array([0, 3]))
    with pytest.raises(LabelError):
        m.loss_and_grads(np.zeros((2, 2)), np.array([0]))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    p = softmax(np.array([vals]))
    assert abs(p.sum() - 1) < 1e-9
    assert np.isfinite(log_softmax(np.array([vals]) * 1e3)).all()


def _fd_case(arch, shape, classes, seed):
    rng = np.random.default_rng(seed)
    m = build_architecture(arch, shape, classes, seed=seed)
    for p in m.params:
        if "bias" in p:
            p["bias"] = rng.standard_normal(p["bias"].shape) * 0.1
    x = rng.random((2,) + shape)
    y = rng.integers(0, classes, 2)
    return m, x, y


GRAD_CASES = [
    (["dense(6,5)", "relu", "dense(5,3)"], (6,), 3),
    (["conv2d(1,2,3,1)", "relu", "maxpool2x2", "dense(18,3)"], (1, 8, 8), 3),
    (["conv2d(2,3,3,2)", "relu", "flatten", "dense(27,4)"], (2, 7, 7), 4),
]


@pytest.mark.parametrize("arch,shape,classes", GRAD_CASES)
def test_input_gradient_matches_finite_differences(arch, shape, classes):
    m, x, y = _fd_case(arch, shape, classes, 5)
    g = m.loss_and_grads(x, y, wrt="input").input
    fd = finite_diff(lambda z: m.loss_and_grads(z, y, wrt="input").loss, x)
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("arch,shape,classes", GRAD_CASES)
def test_param_gradients_match_finite_differences(arch, shape, classes):
    m, x, y = _fd_case(arch, shape, classes, 6)
    g = m.loss_and_grads(x, y, wrt="params").params
    for li, p in enumerate(m.params):
        for name, w in p.items():
            def f(v, li=li, name=name):
                old = m.params[li][name]
                m.params[li][name] = v
                out = m.loss_and_grads(x, y, wrt="params").loss
                m.params[li][name] = old
                return out

            fd = finite_diff(f, w)
            assert rel_err(g[li][name], fd) < 1e-4, (li, name)


def test_sum_reduction_input_gradient_is_per_example(rng):
    m = build_architecture(["dense(4,3)"], input_shape=(4,), num_classes=3, seed=1)
    x = rng.random((5, 4))
    y = rng.integers(0, 3, 5)
    full = m.input_gradient(x, y)
    for i in range(5):
        np.testing.assert_allclose(full[i], m.input_gradient(x[i : i + 1], y[i : i + 1])[0], atol=1e-15)


# -- dropout ----------------------------------------------------------------------


def test_dropout_eval_identity_and_train_unbiased(rng):
    d = Dropout(0.5)
    x = rng.random((1, 8))
    out, _ = d.forward({}, x, train=False)
    assert np.array_equal(out, x)
    n = 20000
    samples = np.stack([d.forward({}, x, train=True, rng=rng)[0][0] for _ in range(n)])
    mean = samples.mean(axis=0)
    se = samples.std(axis=0) / np.sqrt(n)
    assert (np.abs(mean - x[0]) < 3 * se + 1e-12).all()


# -- training ---------------------------------------------------------------------


def _blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0, 0.3, (n, 2)) + np.where(y[:, None] == 1, 2.0, -2.0)
    return LabeledDataset(x, y, 2, "blobs")


def test_fit_separable_blobs_reaches_99():
    data = _blobs()
    m = build_architecture(["dense(2,16)", "relu", "dense(16,2)"], input_shape=(2,), num_classes=2, seed=0)
    hist = fit(m, data, OptimizerConfig(learning_rate=0.05, epochs=10, batch_size=20, lr_decay_epochs=[]))
    assert len(hist) == 10
    assert hist.train_acc[-1] >= 0.99
    assert (m.predict(data.images) == data.labels).mean() >= 0.99


def test_fit_zero_lr_leaves_parameters_bitwise():
    data = _blobs()
    m = build_architecture(["dense(2,4)", "relu", "dense(4,2)"], input_shape=(2,), num_classes=2, seed=0)
    before = [p.copy() for p in m.flat_params()]
    fit(m, data, OptimizerConfig(learning_rate=0.0, weight_decay=0.0, epochs=2, batch_size=50))
    for a, b in zip(before, m.flat_params()):
        assert np.array_equal(a, b)


def test_fit_same_seed_same_history():
    data = _blobs()
    runs = []
    for _ in range(2):
        m = build_architecture(["dense(2,8)", "relu", "dropout(0.5)", "dense(8,2)"], input_shape=(2,), num_classes=2, seed=4)
        h = fit(m, data, OptimizerConfig(epochs=3, batch_size=32, seed=9))
        runs.append((h.to_dict(), m.flat_params()))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1], runs[1][1]):
        assert np.array_equal(a, b)


def test_fit_preconditions():
    data = _blobs(10)
    m = build_architecture(["dense(2,2)"], input_shape=(2,), num_classes=2)
    with pytest.raises(ValueError):
        fit(m, data, OptimizerConfig(batch_size=11))
    with pytest.raises(ValueError):
        fit(m, data.subset([]), OptimizerConfig(batch_size=1))


def test_fit_nonfinite_loss_raises():
    data = _blobs(20)
    m = build_architecture(["dense(2,2)"], input_shape=(2,), num_classes=2)
    m.params[0]["weight"][:] = np.nan
    with pytest.raises(FloatingPointError):
        fit(m, data, OptimizerConfig(epochs=1, batch_size=10))


def test_weight_decay_step_exact():
    m = build_architecture(["dense(3,2)"], input_shape=(3,), num_classes=2, seed=0)
    w0 = m.params[0]["weight"].copy()
    opt = SGD(m, momentum=0.0, weight_decay=0.0005)
    zero = [{k: np.zeros_like(v) for k, v in p.items()} for p in m.params]
    opt.step(zero, lr=0.01)
    np.testing.assert_array_equal(m.params[0]["weight"], w0 - 0.01 * (0.0005 * w0))
    np.testing.assert_allclose(w0 - m.params[0]["weight"], 0.01 * 0.0005 * w0, rtol=1e-9)


def test_optimizer_defaults_and_validation():
    cfg = OptimizerConfig()
    assert (cfg.momentum, cfg.weight_decay, cfg.learning_rate, cfg.batch_size, cfg.epochs) == (0.9, 0.0005, 0.01, 256, 40)
    assert cfg.lr_at(19) == 0.01 and cfg.lr_at(20) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(lr_decay_factor=0.0)


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    m = build_architecture("Conv-2", (1, 12, 12), 5, seed=3)
    path = tmp_path / "m.ckpt"
    save_model(m, path)
    back = load_model(path)
    assert back.layers == m.layers and back.arch == "Conv-2"
    for a, b in zip(m.flat_params(), back.flat_params()):
        assert np.array_equal(a, b)
    x = rng.random((3, 1, 12, 12))
    assert np.array_equal(m.logits(x), back.logits(x))


def test_checkpoint_after_training_round_trips(tmp_path):
    data = _blobs(40)
    m = build_architecture(["dense(2,4)", "relu", "dense(4,2)"], input_shape=(2,), num_classes=2, seed=0)
    fit(m, data, OptimizerConfig(epochs=2, batch_size=8))
    save_model(m, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert np.array_equal(m.logits(data.images), back.logits(data.images))


def test_fc2_checkpoint_size(tmp_path):
    m = build_architecture("FC-2")
    save_model(m, tmp_path / "fc2.ckpt")
    spec = m.spec_string().encode()
    n_floats = 784 * 500 + 500 + 500 * 10 + 10
    assert (tmp_path / "fc2.ckpt").stat().st_size == 4 + 2 + 4 + len(spec) + 4 * n_floats


def test_checkpoint_errors(tmp_path):
    m = build_architecture(["dense(3,2)"], input_shape=(3,), num_classes=2)
    path = tmp_path / "m.ckpt"
    save_model(m, path)
    blob = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(blob[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(blob[:4] + b"\x09\x00" + blob[6:])
    with pytest.raises(CheckpointError, match="version"):
        load_model(tmp_path / "ver.ckpt")
    slen = int.from_bytes(blob[6:10], "little")
    (tmp_path / "head.ckpt").write_bytes(blob[:10] + b"#" * slen + blob[10 + slen :])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "head.ckpt")
