import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeqst import nn
from edgeqst.datagen import GenConfig, generate_dataset
from edgeqst.nn import (
    AdamState,
    Conv1D,
    Dense,
    Flatten,
    Model,
    ModelFormatError,
    ReLU,
    TrainConfig,
    decode_head,
    forward,
    label_targets,
    loss,
    loss_and_grads,
    model_from_bytes,
    model_init,
    model_to_bytes,
    normalize_input,
    train_step,
)


def walk_shapes(input_len, layout):
    """Independent shape/parameter walker over (kind, args) tuples."""
    c, length, flat = 1, input_len, None
    n_params = 0
    for kind, args in layout:
        if kind == "conv":
            cin, cout, k, s = args
            assert cin == c
            length = (length - k) // s + 1
            c = cout
            n_params += cout * cin * k + cout
        elif kind == "flatten":
            flat = c * length
        elif kind == "dense":
            n_in, n_out = args
            n_params += n_in * n_out + n_out
            flat = n_out
    return (c, length) if flat is None else (flat,), n_params


QST_CNN_V1_PARAMS = 128_828  # computed by walk_shapes below and frozen


def test_qst_cnn_v1_shapes_and_param_count():
    m = model_init("qst-cnn-v1", 0)
    shapes = m.shapes()
    assert shapes[1] == (8, 509)
    assert shapes[-1] == (4,)
    layout = [("conv", (1, 8, 16, 4)), ("conv", (8, 16, 8, 4)), ("conv", (16, 32, 8, 4)),
            ("flatten", None), ("dense", (960, 128)), ("dense", (128, 4))]
    out, n = walk_shapes(2048, layout)
    assert out == (4,)
    assert n == QST_CNN_V1_PARAMS == m.n_params()


@settings(max_examples=20, deadline=None)
@given(st.data())
def test_shape_algebra_random_architectures(data):
    input_len = data.draw(st.integers(40, 400))
    convs, layout, c, length = [], [], 1, input_len
    for _ in range(data.draw(st.integers(1, 3))):
        k = data.draw(st.integers(1, min(8, length)))
        s = data.draw(st.integers(1, 4))
        cout = data.draw(st.integers(1, 6))
        convs.append((c, cout, k, s))
        layout.append(("conv", (c, cout, k, s)))
        length = (length - k) // s + 1
        c = cout
        if length < 8:
            break
    hidden = data.draw(st.integers(1, 16))
    layout += [("flatten", None), ("dense", (c * length, hidden)), ("dense", (hidden, 4))]
    layers = nn.build_layers(input_len, convs, hidden)
    nn.init_layers(layers, np.random.default_rng(0))
    m = Model(layers, input_len)
    out, n = walk_shapes(input_len, layout)
    assert m.shapes()[-1] == out
    assert m.n_params() == n
    y = forward(m, np.random.default_rng(1).normal(size=(2, 1, input_len)))
    assert y.shape == (2, 4)


def test_model_init_deterministic():
    assert model_init("qst-cnn-v1", 5).checksum() == model_init("qst-cnn-v1", 5).checksum()
    assert model_init("qst-cnn-v1", 5).checksum() != model_init("qst-cnn-v1", 6).checksum()
    with pytest.raises(ValueError):
        model_init("nope", 0)


def test_normalize_input():
    m = model_init("tiny", 0)
    x = np.arange(32, dtype=np.float32)
    np.testing.assert_array_equal(normalize_input(x, m)[0, 0], x)
    m.norm_mean, m.norm_scale = 1.5, 2.0
    np.testing.assert_array_equal(normalize_input(x, m)[0, 0], (x - 1.5) / 2.0)
    with pytest.raises(ValueError):
        normalize_input(np.zeros(31), m)


def test_forward_zero_weights():
    m = model_init("tiny", 0)
    for p in m.parameters():
        p[...] = 0
    y = forward(m, normalize_input(np.ones((3, 32)), m))
    np.testing.assert_allclose(y[:, :2], math.log(2))
    np.testing.assert_array_equal(y[:, 2:], 0)


def test_forward_batch_slicing_invariant():
    m = model_init("qst-cnn-v1", 1)
    x = np.random.default_rng(2).normal(size=(5, 1, 2048))
    batch = forward(m, x)
    single = np.concatenate([forward(m, x[i : i + 1]) for i in range(5)])
    np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(forward(m, x), batch)


def test_dense_hand_computed():
    d = Dense(3, 3, np.array([[1, 0, 0], [0, 2, 0], [1, 1, 1]], np.float32), np.array([0.5, 0, -1], np.float32))
    y, _ = d.forward(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(y, [[1.5, 4.0, 5.0]])


def test_conv_hand_computed():
    c = Conv1D(1, 1, 2, 2, np.array([[[1, -1]]], np.float32), np.array([0.25], np.float32))
    y, _ = c.forward(np.array([[[1.0, 3.0, 2.0, 7.0, 5.0]]]))
    np.testing.assert_array_equal(y, [[[-1.75, -4.75]]])


def test_decode_head():
    p = decode_head([0.5, 0.1, 1.0, 0.0])
    assert (p.r, p.nbar, p.theta) == (0.5, 0.1, 0.0)
    assert decode_head([0, 0, 0, 1]).theta == pytest.approx(math.pi / 4)
    for eps in (1e-3, 1e-9, 1e-15):
        t = decode_head([0, 0, -1, eps]).theta
        assert math.pi / 2 - eps <= t <= math.pi / 2
        t = decode_head([0, 0, -1, -eps]).theta
        assert math.pi / 2 <= t <= math.pi / 2 + eps
    for ang in np.linspace(-3, 3, 61):
        t = decode_head([0, 0, math.cos(ang), math.sin(ang)]).theta
        assert 0 <= t < math.pi
        assert math.cos(2 * t) == pytest.approx(math.cos(ang), abs=1e-12)


def test_loss_examples():
    labels = np.array([[0.3, 0.4, 0.2]])
    t = label_targets(labels)
    w = [1, 1, 1, 1]
    assert loss(t, t, w) == 0
    t_shift = label_targets(np.array([[0.3, 0.4 + math.pi, 0.2]]))
    np.testing.assert_allclose(t, t_shift, atol=1e-12)
    pred = t.copy()
    pred[0, 0] = 1.0
    target = label_targets(np.array([[0.0, 0.4, 0.2]]))
    assert loss(pred, target, [1, 0, 0, 0]) == 1.0
    assert loss(pred, target, w) == pytest.approx(1.0)


def _tiny_f64(seed=0):
    m = model_init("tiny", seed)
    for layer in m.layers:
        if hasattr(layer, "weight") and layer.weight is not None:
            layer.weight = layer.weight.astype(np.float64)
            layer.bias = np.random.default_rng(seed).normal(scale=0.1, size=layer.bias.shape)
    return m


def test_gradients_match_finite_differences():
    m = _tiny_f64(3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 1, 32))
    t = label_targets(rng.uniform(0, 1, size=(3, 3)))
    w = np.array([1.0, 2.0, 0.5, 0.5])
    _, grads = loss_and_grads(m, x, t, w)
    h = 1e-6
    for p, g in zip(m.parameters(), grads):
        num = np.empty_like(g)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = nn.loss(nn.forward(m, x), t, w)
            p[idx] = old - h
            dn = nn.loss(nn.forward(m, x), t, w)
            p[idx] = old
            num[idx] = (up - dn) / (2 * h)
        err = np.abs(num - g)
        assert np.all(err <= 1e-3 * np.maximum(np.abs(num), np.abs(g)) + 1e-9), (p.shape, err.max())


def test_input_gradient_through_every_layer_type():
    m = _tiny_f64(5)
    x = np.random.default_rng(6).normal(size=(2, 1, 32))
    t = label_targets(np.array([[0.2, 1.0, 0.1], [0.9, 2.0, 0.0]]))
    w = np.ones(4)
    z, caches = nn.forward_raw(m, x, keep=True)
    pred = nn.apply_head(z)
    g = 2 * (pred - t) * w / 2
    g[:, :2] *= 1 / (1 + np.exp(-z[:, :2]))
    for layer, cache in zip(reversed(m.layers), reversed(caches)):
        g, _ = layer.backward(g, cache)
    h = 1e-6
    for idx in [(0, 0, 0), (0, 0, 7), (1, 0, 31), (1, 0, 16)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (nn.loss(forward(m, xp), t, w) - nn.loss(forward(m, xm), t, w)) / (2 * h)
        assert g[idx] == pytest.approx(num, rel=1e-3, abs=1e-9)


def test_zero_lr_leaves_model_unchanged():
    m = model_init("tiny", 0)
    before = model_to_bytes(m)
    x = np.random.default_rng(0).normal(size=(4, 1, 32))
    t = label_targets(np.random.default_rng(1).uniform(size=(4, 3)))
    cfg = TrainConfig(lr=0.0)
    train_step(m, x, t, cfg, AdamState.zeros(m))
    assert model_to_bytes(m) == before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    m = model_init("tiny", 0)
    x = np.full((1, 1, 32), np.nan)
    with pytest.raises(nn.NonFiniteLossError):
        train_step(m, x, np.zeros((1, 4)), TrainConfig(), AdamState.zeros(m))


def test_single_example_overfit():
    ds = generate_dataset(GenConfig(n_examples=1, global_seed=1))
    m = model_init("qst-cnn-v1", 0)
    m.norm_scale = float(np.std(ds.values))
    x = normalize_input(ds.values, m)
    t = label_targets(ds.labels)
    cfg = TrainConfig()
    state = AdamState.zeros(m)
    for _ in range(500):
        train_step(m, x, t, cfg, state)
    assert loss(forward(m, x), t, cfg.weights) < 1e-4


def test_softplus_head_nonnegative():
    m = model_init("tiny", 2)
    for p in m.parameters():
        p *= 50
    y = forward(m, np.random.default_rng(0).normal(scale=10, size=(50, 1, 32)))
    assert np.all(y[:, :2] >= 0)


def test_train_small_run(tmp_path):
    ds = generate_dataset(GenConfig(n_examples=300, global_seed=4))
    cfg = TrainConfig(epochs=3, seed=1)
    a = nn.train(ds, cfg)
    b = nn.train(ds, cfg)
    assert model_to_bytes(a.model) == model_to_bytes(b.model)
    assert a.log_csv() == b.log_csv()
    assert a.log_csv().splitlines()[0] == "epoch,train_loss,val_loss"
    vals = [v for _, _, v in a.log]
    assert min(vals[1:]) <= vals[0]
    assert a.log[a.best_epoch][2] == min(vals)


def test_model_round_trip(tmp_path):
    m = model_init("qst-cnn-v1", 3)
    m.norm_mean, m.norm_scale = 0.01, 1.7
    path = tmp_path / "m.qnn"
    nn.save_model(m, path)
    back = nn.load_model(path)
    assert (back.norm_mean, back.norm_scale) == (0.01, 1.7)
    assert model_to_bytes(back) == path.read_bytes()
    x = normalize_input(np.random.default_rng(0).normal(size=(2, 2048)), m)
    assert forward(back, x).tobytes() == forward(m, x).tobytes()


def test_model_format_errors():
    buf = model_to_bytes(model_init("tiny", 0))
    with pytest.raises(ModelFormatError, match="truncated|CRC"):
        model_from_bytes(buf[:-7])
    for pos in (10, len(buf) // 2, len(buf) - 5):
        bad = bytearray(buf)
        bad[pos] ^= 0x01
        with pytest.raises(ModelFormatError, match="CRC"):
            model_from_bytes(bytes(bad))
    with pytest.raises(ModelFormatError, match="bad magic"):
        model_from_bytes(b"QNNQ" + buf[4:])


def test_layer_validation():
    with pytest.raises(ValueError):
        Conv1D(2, 4, 3).out_shape((1, 10))
    with pytest.raises(ValueError):
        Dense(5, 2).out_shape((4,))
    assert Flatten().out_shape((3, 4)) == (12,)
    assert ReLU().out_shape((3, 4)) == (3, 4)
