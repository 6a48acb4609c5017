import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsadv import models as M
from capsadv import tensor as T
from capsadv.datasets import LabeledDataset
from capsadv.gradcheck import numerical_gradient, relative_error
from capsadv.tensor import Tensor


def tiny_capsnet(**kw):
    cfg = M.CapsNetConfig(conv_channels=(4,), conv_kernels=(3,), primary_channels=2, primary_dim=4,
                          primary_kernel=3, primary_stride=2, class_dim=4, decoder_hidden=(8,),
                          image_size=9, **kw)
    return M.CapsNet(cfg, seed=0)


def tiny_convnet():
    return M.ConvNet(M.ConvNetConfig(channels=(3, 4), kernel=3, hidden=8, image_size=14), seed=0)


# squash ----------------------------------------------------------------------

def test_squash_fixed_points():
    np.testing.assert_array_equal(M.squash(np.zeros(3)), np.zeros(3))
    assert np.linalg.norm(M.squash(np.array([0.6, 0.8]))) == pytest.approx(0.5, abs=1e-15)
    assert np.linalg.norm(M.squash(np.array([3.0, 0.0, 0.0]))) == pytest.approx(0.9, abs=1e-15)


def _norm(v):
    # scaled, so tiny outputs (|v| ~ 1e-168) don't underflow when squared
    top = np.abs(v).max()
    return 0.0 if top == 0 else top * np.linalg.norm(v / top)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_squash_norm_and_direction(vals):
    s = np.array(vals)
    v = M.squash(s)
    n = np.linalg.norm(s)
    assert _norm(v) < 1.0
    assert _norm(v) == pytest.approx(n * n / (1 + n * n), rel=1e-12, abs=1e-200)
    if n > 1e-6:
        np.testing.assert_allclose(v / np.linalg.norm(v), s / n, atol=1e-12)


def test_squash_tensor_matches_array():
    s = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_allclose(M.squash(Tensor(s)).data, M.squash(s), rtol=1e-15)


# routing ---------------------------------------------------------------------

def hand_routing(u, r):
    """Scalar-loop transcription of the routing recurrence: u[i][j] is a list."""
    I, J = len(u), len(u[0])
    D = len(u[0][0])
    b = [[0.0] * J for _ in range(I)]
    coeff_trace = []
    v = None
    for it in range(r):
        c = []
        for i in range(I):
            e = [math.exp(b[i][j]) for j in range(J)]
            c.append([ej / sum(e) for ej in e])
        coeff_trace.append(c)
        v = []
        for j in range(J):
            s = [sum(c[i][j] * u[i][j][d] for i in range(I)) for d in range(D)]
            n2 = sum(x * x for x in s)
            scale = n2 / (1 + n2) / math.sqrt(n2) if n2 > 0 else 0.0
            v.append([scale * x for x in s])
        if it < r - 1:
            for i in range(I):
                for j in range(J):
                    b[i][j] += sum(u[i][j][d] * v[j][d] for d in range(D))
    return coeff_trace, v


def test_routing_single_iteration_uniform():
    u = np.random.default_rng(0).standard_normal((2, 5, 3, 4))
    trace = []
    M.dynamic_routing(Tensor(u), 1, trace)
    np.testing.assert_allclose(trace[0], 1 / 3, rtol=0, atol=1e-15)


def test_routing_identical_estimates_single_output():
    u = np.array([0.3, -1.2, 0.5])
    v = M.dynamic_routing(Tensor(u.reshape(1, 1, 1, 3)), 3).data
    np.testing.assert_allclose(v.reshape(3), M.squash(u), rtol=1e-14)


def test_routing_matches_hand_trace():
    u = [[[1.0, 0.5], [-0.3, 0.8]],
         [[0.9, 0.7], [0.4, -1.1]]]
    coeffs, v_ref = hand_routing(u, 3)
    trace = []
    v = M.dynamic_routing(Tensor(np.array(u)[None]), 3, trace).data[0]
    assert len(trace) == 3
    for got, ref in zip(trace, coeffs):
        np.testing.assert_allclose(got[0], np.array(ref), rtol=1e-13)
    np.testing.assert_allclose(v, np.array(v_ref), rtol=1e-13)
    # the recurrence must have moved the coefficients away from uniform
    assert abs(trace[-1][0, 0, 0] - 0.5) > 1e-3


def test_routing_requires_one_iteration():
    with pytest.raises(ValueError):
        M.dynamic_routing(Tensor(np.zeros((1, 1, 1, 2))), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 31))
def test_routing_coefficients_are_simplex(r, seed):
    u = np.random.default_rng(seed).standard_normal((2, 6, 4, 3)) * 3
    trace = []
    v = M.dynamic_routing(Tensor(u), r, trace).data
    assert len(trace) == r
    for c in trace:
        assert np.all(c >= 0)
        np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-12)
    norms = np.linalg.norm(v, axis=-1)
    assert np.all((norms >= 0) & (norms < 1))


# logits and losses -------------------------------------------------------------

def test_capsule_logit_map():
    assert M.capsule_logits(np.array([0.5]))[0] == 0.0
    assert M.capsule_logits(np.array([(1 + math.tanh(1.0)) / 2]))[0] == pytest.approx(1.0, abs=1e-12)
    top = M.capsule_logits(np.array([1.0]))[0]
    assert top == pytest.approx(math.atanh(1 - 2e-6), rel=1e-9) and math.isfinite(top)
    assert np.all(np.isfinite(M.capsule_logits(Tensor([0.0, 1.0])).data))


def test_margin_loss_examples():
    l1 = np.full(10, 0.05)
    l1[3] = 0.95
    assert M.margin_loss(l1, 3).item() == 0.0
    assert M.margin_loss(np.zeros(10), 7).item() == pytest.approx(0.81, abs=1e-15)
    l3 = np.zeros(10)
    l3[:2] = [0.8, 0.3]
    expected = (0.9 - 0.8) ** 2 + 0.5 * (0.3 - 0.1) ** 2
    assert M.margin_loss(l3, 0).item() == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.03, abs=1e-15)


@pytest.mark.parametrize("bad", [10, -1])
def test_margin_loss_invalid_label(bad):
    with pytest.raises(ValueError):
        M.margin_loss(np.zeros(10), bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=10, max_size=10), st.integers(0, 9))
def test_margin_loss_nonnegative_and_zero_condition(lengths, label):
    lengths = np.array(lengths)
    loss = M.margin_loss(lengths, label).item()
    assert loss >= 0
    others = np.delete(lengths, label)
    hinge_free = lengths[label] >= 0.9 and np.all(others <= 0.1)
    assert (loss == 0.0) == hinge_free


def test_reconstruction_loss_examples():
    x = np.random.default_rng(0).random((28, 28))
    assert M.reconstruction_loss(x, x).item() == 0.0
    half = np.full((28, 28), 0.5)
    assert M.reconstruction_loss(half, half).item() == 0.0
    r = x.copy()
    r[3, 4] += 1.0
    assert M.reconstruction_loss(x, r).item() == pytest.approx(0.0005, rel=1e-12)


# model-level properties ----------------------------------------------------------

@pytest.mark.parametrize("make", [tiny_convnet, tiny_capsnet])
def test_argmax_z_equals_argmax_f(make):
    m = make()
    size = m.config.image_size
    x = np.random.default_rng(1).random((20, size, size))
    z = m.logits(x)
    np.testing.assert_array_equal(np.argmax(z, 1), np.argmax(m.probs(x), 1))


def test_capsnet_probs_are_capsule_lengths():
    m = tiny_capsnet()
    x = np.random.default_rng(2).random((6, 9, 9))
    lengths = m.capsule_lengths(x)
    assert np.all((lengths >= 0) & (lengths < 1))
    inside = (lengths > 1e-6) & (lengths < 1 - 1e-6)
    np.testing.assert_allclose(m.probs(x)[inside], lengths[inside], rtol=1e-9)


def test_capsnet_routing_trace_is_simplex():
    m = tiny_capsnet()
    m.logits(np.random.default_rng(3).random((4, 9, 9)))
    assert len(m.last_routing) == 3
    for c in m.last_routing:
        np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-12)


def test_none_of_the_above_capsule_excluded_from_logits():
    m = tiny_capsnet(none_of_the_above=True)
    x = np.random.default_rng(4).random((3, 9, 9))
    assert m.n_out == 11
    assert m.logits(x).shape == (3, 10)
    assert m.last_routing[0].shape[2] == 11


@pytest.mark.parametrize("make", [tiny_convnet, tiny_capsnet])
def test_inference_is_deterministic(make):
    m = make()
    size = m.config.image_size
    x = np.random.default_rng(5).random((4, size, size))
    assert m.logits(x).tobytes() == m.logits(x).tobytes()


@pytest.mark.parametrize("make", [tiny_convnet, tiny_capsnet])
def test_end_to_end_input_gradient(make):
    m = make()
    size = m.config.image_size
    x = np.random.default_rng(6).random((2, size, size))
    weights = np.random.default_rng(7).standard_normal((2, 10))

    def fn(xt):
        return T.tsum(m.forward(xt) * weights)

    xt = Tensor(x, requires_grad=True)
    fn(xt).backward()
    num = numerical_gradient(fn, [x], 0, h=1e-6)
    assert relative_error(xt.grad, num) <= 1e-5


def test_parameter_gradients_capsnet_training_loss():
    m = tiny_capsnet()
    x = np.random.default_rng(8).random((3, 9, 9))
    y = np.array([1, 4, 9])
    name = "caps.w"
    base = {k: v.copy() for k, v in m.params.items()}
    # default init leaves capsule lengths tiny; scale up so the loss is sensitive
    base["caps.w"] *= 30.0
    base["primary.w"] *= 10.0

    def fn(w):
        p = {k: Tensor(v) for k, v in base.items()}
        p[name] = w
        return m.training_loss(Tensor(x), y, None, p)[0]

    w0 = base[name]
    wt = Tensor(w0.copy(), requires_grad=True)
    fn(wt).backward()
    coords = list(range(0, w0.size, 7))
    num = numerical_gradient(fn, [w0], 0, 1e-6, coords)
    np.testing.assert_allclose(wt.grad.reshape(-1)[coords], num.reshape(-1)[coords],
                               rtol=1e-5, atol=1e-5 * np.abs(num).max())


# training ----------------------------------------------------------------------

def toy_two_class(n=200, size=6, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.random((n, size, size)) * 0.5
    x[y == 1, :, : size // 2] += 0.5
    x[y == 0, :, size // 2:] += 0.5
    return LabeledDataset(x, y, "train")


def test_dense_convnet_separates_toy_data():
    m = M.ConvNet(M.ConvNetConfig(channels=(), hidden=16, dropout=0.0, image_size=6), seed=0)
    data = toy_two_class()
    hist = M.train(m, data, M.TrainConfig(epochs=20, batch_size=32, lr=1e-2, seed=0))
    assert m.accuracy(data.images, data.labels) == 1.0
    assert len(hist.train_loss) == 20
    assert m.trained


def test_training_reports_test_accuracy_per_epoch():
    m = tiny_capsnet()
    data = toy_two_class(n=40, size=9)
    hist = M.train(m, data, M.TrainConfig(epochs=2, batch_size=16, seed=1), test_set=data)
    assert len(hist.test_accuracy) == 2
    assert all(0 <= a <= 1 for a in hist.test_accuracy)


def test_training_aborts_on_nan():
    data = toy_two_class(n=8)
    data.images[0, 0, 0] = np.nan
    m = M.ConvNet(M.ConvNetConfig(channels=(), hidden=4, image_size=6))
    with pytest.raises(M.TrainingDiverged, match="epoch 0"):
        M.train(m, data, M.TrainConfig(epochs=1, batch_size=8))


def test_training_rejects_bad_config():
    m = M.ConvNet(M.ConvNetConfig(channels=(), hidden=4, image_size=6))
    with pytest.raises(ValueError):
        M.train(m, toy_two_class(n=4), M.TrainConfig(epochs=0))
    with pytest.raises(ValueError):
        M.train(m, LabeledDataset(np.zeros((0, 6, 6)), np.zeros(0, int)), M.TrainConfig())


def test_batchnorm_running_stats_used_at_eval():
    m = tiny_convnet()
    data = toy_two_class(n=32, size=14)
    M.train(m, data, M.TrainConfig(epochs=1, batch_size=16, seed=0))
    assert not np.allclose(m.buffers["bn1.mean"], 0.0)
    z1 = m.logits(data.images[:1])[0]
    z_batch = m.logits(data.images[:5])[0]
    # eval mode: a sample's logits do not depend on its batch companions
    np.testing.assert_allclose(z1, z_batch, rtol=1e-12)


# checkpoints -------------------------------------------------------------------

@pytest.mark.parametrize("make", [tiny_convnet, tiny_capsnet])
def test_checkpoint_roundtrip_is_bit_identical(make, tmp_path):
    m = make()
    m.trained = True
    m.params[next(iter(m.params))] += 0.123456789
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    M.save_checkpoint(m, a)
    loaded = M.load_checkpoint(a)
    M.save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:5] == b"CFML1"
    assert loaded.kind == m.kind and loaded.trained
    for k in m.params:
        assert loaded.params[k].tobytes() == m.params[k].tobytes()
    x = np.random.default_rng(0).random((2, m.config.image_size, m.config.image_size))
    assert loaded.logits(x).tobytes() == m.logits(x).tobytes()


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    m = tiny_convnet()
    p = tmp_path / "m.bin"
    M.save_checkpoint(m, p)
    raw = p.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX1" + raw[5:])
    with pytest.raises(ValueError, match="magic"):
        M.load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="truncated"):
        M.load_checkpoint(tmp_path / "short.bin")


def test_untrained_model_flagged():
    with pytest.raises(M.UntrainedModelError):
        tiny_convnet().require_trained()


def test_architecture_presets():
    full = M.build_model("capsnet", preset="full")
    assert full.params["conv1.w"].shape == (64, 1, 9, 9)
    assert full.params["primary.w"].shape == (256, 64, 9, 9)
    assert full.n_primary == 32 * 6 * 6
    assert full.params["caps.w"].shape == (1152, 8, 160)
    fashion = M.build_model("capsnet", dataset="fashion", preset="full")
    assert fashion.params["conv2.w"].shape == (32, 32, 3, 3)
    assert fashion.grid == 8
    desk = M.build_model("capsnet")
    assert desk.params["conv1.w"].shape == (64, 1, 9, 9)
