import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cajump.nn import functional as F
from cajump.nn import checkpoint
from cajump.nn.gradcheck import gradient_check, relative_error
from cajump.nn.model import (
    DEFAULT_ARCHITECTURE,
    ArchitectureError,
    Dense,
    Model,
    ModelConfig,
    parse_architecture,
)
from cajump.nn.optim import AdamState, NonFiniteError, adam_step

from oracles import central_difference, conv2d, dense

RNG = np.random.default_rng(1234)


def rel(a, b):
    return float(relative_error(a, b).max())


# --- convolution ---------------------------------------------------------------


def test_conv_identity_kernel():
    x = RNG.normal(size=(2, 1, 6, 7))
    out, _ = F.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), padding="valid")
    np.testing.assert_array_equal(out, x)


def test_conv_ones_kernel_same_padding():
    out, _ = F.conv2d_forward(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), np.zeros(1), padding="same")
    assert out.shape == (1, 1, 5, 5)
    assert np.all(out[0, 0, 1:-1, 1:-1] == 9)
    assert out[0, 0, 0, 0] == 4


def test_conv_matches_nested_loops():
    x = RNG.normal(size=(1, 1, 5, 5))
    w = RNG.normal(size=(2, 1, 3, 3))
    b = RNG.normal(size=2)
    out, _ = F.conv2d_forward(x, w, b, padding="valid")
    np.testing.assert_allclose(out, conv2d(x, w, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding,pad", [(1, "same", (1, 1, 1, 1)), (2, "valid", (0, 0, 0, 0)), (2, 1, (1, 1, 1, 1))])
def test_conv_stride_padding(stride, padding, pad):
    x = RNG.normal(size=(2, 3, 7, 6))
    w = RNG.normal(size=(4, 3, 3, 3))
    b = RNG.normal(size=4)
    out, _ = F.conv2d_forward(x, w, b, stride, padding)
    np.testing.assert_allclose(out, conv2d(x, w, b, stride, pad), atol=1e-12)
    assert out.shape[2] == F.conv_output_size(7, 3, stride, padding)


def test_conv_shape_error_names_shapes():
    with pytest.raises(F.DimensionError, match=r"\(1, 2, 5, 5\).*\(3, 1, 3, 3\)"):
        F.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((3, 1, 3, 3)), np.zeros(3))


def test_conv_backward_zero():
    x = RNG.normal(size=(2, 2, 5, 5))
    w = RNG.normal(size=(3, 2, 3, 3))
    out, cache = F.conv2d_forward(x, w, np.zeros(3))
    dx, dw, db = F.conv2d_backward(np.zeros_like(out), cache)
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_backward_single_pixel_is_patch():
    x = RNG.normal(size=(1, 2, 6, 6))
    w = RNG.normal(size=(1, 2, 3, 3))
    out, cache = F.conv2d_forward(x, w, np.zeros(1), padding="valid")
    d = np.zeros_like(out)
    d[0, 0, 2, 1] = 1.0
    _, dw, db = F.conv2d_backward(d, cache)
    np.testing.assert_array_equal(dw[0], x[0, :, 2:5, 1:4])
    assert db[0] == 1.0


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "valid"), (1, "valid"), (2, "same")])
def test_conv_backward_finite_difference(stride, padding):
    x = RNG.normal(size=(2, 2, 6, 7))
    w = RNG.normal(size=(3, 2, 3, 3))
    b = RNG.normal(size=3)
    up = RNG.normal(size=F.conv2d_forward(x, w, b, stride, padding)[0].shape)
    _, cache = F.conv2d_forward(x, w, b, stride, padding)
    dx, dw, db = F.conv2d_backward(up, cache)
    loss = lambda: float((F.conv2d_forward(x, w, b, stride, padding)[0] * up).sum())
    assert rel(dx, central_difference(lambda _: loss(), x)) < 1e-6
    assert rel(dw, central_difference(lambda _: loss(), w)) < 1e-6
    assert rel(db, central_difference(lambda _: loss(), b)) < 1e-6


# --- batch normalisation -----------------------------------------------------------


def test_batchnorm_constant_input():
    x = np.full((4, 2, 3, 3), 7.0)
    out, _ = F.batchnorm_forward(x, np.array([3.0, -2.0]), np.array([0.5, 0.5]))
    np.testing.assert_allclose(out, 0.5)


def test_batchnorm_standardises():
    x = RNG.normal(3.0, 2.5, size=(8, 3, 5, 5))
    out, _ = F.batchnorm_forward(x, np.ones(3), np.zeros(3), eps=1e-12)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-9)


def test_batchnorm_running_stats_and_infer():
    x = RNG.normal(size=(6, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    F.batchnorm_forward(x, np.ones(2), np.zeros(2), "train", rm, rv, momentum=0.9)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    out, _ = F.batchnorm_forward(x, np.ones(2), np.zeros(2), "infer", rm, rv, eps=0.0)
    np.testing.assert_allclose(out, (x - rm[None, :, None, None]) / np.sqrt(rv)[None, :, None, None])


def test_batchnorm_degenerate_batch():
    with pytest.raises(F.DegenerateBatchError):
        F.batchnorm_forward(np.zeros((1, 2, 3, 3)), np.ones(2), np.zeros(2), "train")


def test_batchnorm_backward_constant_upstream():
    x = RNG.normal(size=(4, 3, 4, 4))
    _, cache = F.batchnorm_forward(x, np.ones(3), np.zeros(3))
    up = np.broadcast_to(np.array([1.0, -2.0, 0.5])[None, :, None, None], x.shape).copy()
    dx, _, _ = F.batchnorm_backward(up, cache)
    np.testing.assert_allclose(dx.sum(axis=(0, 2, 3)), 0, atol=1e-10)


def test_batchnorm_backward_zero():
    x = RNG.normal(size=(4, 3, 4, 4))
    _, cache = F.batchnorm_forward(x, RNG.normal(size=3), RNG.normal(size=3))
    assert not any(g.any() for g in F.batchnorm_backward(np.zeros_like(x), cache))


@pytest.mark.parametrize("shape", [(4, 3, 3, 3), (5, 4)])
def test_batchnorm_backward_finite_difference(shape):
    x = RNG.normal(size=shape)
    g = RNG.normal(size=shape[1])
    be = RNG.normal(size=shape[1])
    up = RNG.normal(size=shape)
    _, cache = F.batchnorm_forward(x, g, be)
    dx, dg, db = F.batchnorm_backward(up, cache)
    loss = lambda _: float((F.batchnorm_forward(x, g, be)[0] * up).sum())
    assert rel(dx, central_difference(loss, x)) < 1e-6
    assert rel(dg, central_difference(loss, g)) < 1e-6
    assert rel(db, central_difference(loss, be)) < 1e-6


# --- other layers --------------------------------------------------------------------


def test_relu():
    x = np.array([[-1.0, 0.0, 2.0]])
    out, mask = F.relu_forward(x)
    np.testing.assert_array_equal(out, [[0, 0, 2]])
    np.testing.assert_array_equal(F.relu_backward(np.ones_like(x), mask), [[0, 0, 1]])


def test_maxpool_first_index_tie_break():
    x = np.ones((1, 1, 2, 2))
    out, cache = F.maxpool_forward(x, 2)
    dx = F.maxpool_backward(np.array([[[[5.0]]]]), cache)
    np.testing.assert_array_equal(dx[0, 0], [[5, 0], [0, 0]])


def test_maxpool_odd_size_floors():
    out, _ = F.maxpool_forward(RNG.normal(size=(1, 1, 25, 25)), 2)
    assert out.shape == (1, 1, 12, 12)


def test_maxpool_backward_finite_difference():
    x = RNG.normal(size=(2, 2, 6, 5))
    up = RNG.normal(size=F.maxpool_forward(x, 2)[0].shape)
    _, cache = F.maxpool_forward(x, 2)
    dx = F.maxpool_backward(up, cache)
    fd = central_difference(lambda _: float((F.maxpool_forward(x, 2)[0] * up).sum()), x)
    assert rel(dx, fd) < 1e-6


def test_global_avg_pool_resolution_invariant():
    means = np.array([0.3, -1.2])
    a = np.broadcast_to(means[None, :, None, None], (1, 2, 150, 150))
    b = np.broadcast_to(means[None, :, None, None], (1, 2, 25, 25))
    np.testing.assert_allclose(F.global_avg_pool_forward(a)[0], F.global_avg_pool_forward(b)[0])


def test_global_avg_pool_backward():
    x = RNG.normal(size=(2, 3, 4, 5))
    up = RNG.normal(size=(2, 3))
    _, shape = F.global_avg_pool_forward(x)
    fd = central_difference(lambda _: float((F.global_avg_pool_forward(x)[0] * up).sum()), x)
    assert rel(F.global_avg_pool_backward(up, shape), fd) < 1e-6


def test_dense_matches_loops_and_gradients():
    x = RNG.normal(size=(3, 5))
    w = RNG.normal(size=(5, 4))
    b = RNG.normal(size=4)
    out, cache = F.dense_forward(x, w, b)
    np.testing.assert_allclose(out, dense(x, w, b), atol=1e-12)
    up = RNG.normal(size=(3, 4))
    dx, dw, db = F.dense_backward(up, cache, w)
    loss = lambda _: float((F.dense_forward(x, w, b)[0] * up).sum())
    assert rel(dx, central_difference(loss, x)) < 1e-6
    assert rel(dw, central_difference(loss, w)) < 1e-6
    assert rel(db, central_difference(loss, b)) < 1e-6


def test_softmax_uniform():
    np.testing.assert_allclose(F.softmax_forward(np.zeros((2, 10))), 0.1)


@given(st.lists(st.floats(-50, 50), min_size=10, max_size=10), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalised(z, c):
    z = np.array([z])
    p = F.softmax_forward(z)
    np.testing.assert_allclose(p, F.softmax_forward(z + c), rtol=0, atol=1e-12)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_probabilities_open_interval():
    p = F.softmax_forward(RNG.normal(size=(50, 10)) * 5)
    assert np.all(p > 0) and np.all(p < 1)


def test_softmax_backward_finite_difference():
    z = RNG.normal(size=(3, 10))
    up = RNG.normal(size=(3, 10))
    p = F.softmax_forward(z)
    fd = central_difference(lambda _: float((F.softmax_forward(z) * up).sum()), z)
    assert rel(F.softmax_backward(up, p), fd) < 1e-6


# --- loss ------------------------------------------------------------------------------


def test_loss_perfect():
    p = np.eye(10)[[2, 5]]
    assert F.sparse_ce_loss(p, [2, 5])[0] == 0.0


def test_loss_uniform():
    loss, _ = F.sparse_ce_loss(np.full((4, 10), 0.1), [0, 1, 2, 3])
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_loss_hand_case():
    p = np.zeros((2, 10))
    p[0, 0], p[0, 1] = 0.5, 0.5
    p[1, 3], p[1, 4] = 0.25, 0.75
    loss, _ = F.sparse_ce_loss(p, [0, 3])
    assert loss == pytest.approx(-(math.log(0.5) + math.log(0.25)) / 2, abs=1e-12)
    assert loss == pytest.approx(1.039721, abs=1e-6)


def test_loss_fused_gradient():
    z = RNG.normal(size=(4, 10))
    y = np.array([1, 0, 9, 4])
    _, grad = F.sparse_ce_loss(F.softmax_forward(z), y)
    fd = central_difference(lambda _: F.sparse_ce_loss(F.softmax_forward(z), y)[0], z)
    assert rel(grad, fd) < 1e-6


def test_loss_errors():
    with pytest.raises(ValueError):
        F.sparse_ce_loss(np.full((1, 10), 0.1), [10])
    with pytest.raises(ValueError):
        F.sparse_ce_loss(np.full((1, 10), 0.2), [0])


# --- adam ---------------------------------------------------------------------------------


def test_adam_first_step():
    p = {"x": np.array([0.0])}
    adam_step(p, {"x": np.array([0.5])}, st_ := AdamState(lr=1e-3))
    assert st_.t == 1
    assert abs(p["x"][0]) == pytest.approx(1e-3 * 0.5 / (0.5 + 1e-8), rel=1e-9)
    assert abs(p["x"][0]) == pytest.approx(9.99e-4, abs=1e-6)


def test_adam_zero_gradient():
    p = {"x": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(50):
        adam_step(p, {"x": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["x"], [1.0, -2.0])
    assert state.t == 50


def scalar_adam(x, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    xs = []
    for t in range(1, steps + 1):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        xs.append(x)
    return xs


def test_adam_quadratic_matches_scalar_oracle():
    p = {"x": np.array([1.0])}
    state = AdamState(lr=0.1)
    traj = []
    for _ in range(100):
        adam_step(p, {"x": 2 * p["x"]}, state)
        traj.append(p["x"][0])
    ref = scalar_adam(1.0, 100, 0.1)
    np.testing.assert_allclose(traj, ref, rtol=0, atol=1e-12)
    # the oracle itself: after the first dip below 0.1, |x| shrinks overall
    burn = next(i for i, x in enumerate(ref) if abs(x) < 0.1)
    assert abs(ref[-1]) < abs(ref[burn]) and abs(ref[-1]) < 0.1


def test_adam_non_finite():
    with pytest.raises(NonFiniteError, match="w"):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 1.0])}, AdamState())


# --- model, architecture, gradient check ---------------------------------------------------


def test_default_architecture_parses():
    cfg = ModelConfig.default()
    assert isinstance(cfg.layers[-2], Dense) and cfg.layers[-2].units == 10
    assert parse_architecture(cfg.to_text()) == cfg.layers


def test_architecture_errors():
    with pytest.raises(ArchitectureError):
        parse_architecture("conv out=16 kernel=3")
    with pytest.raises(ArchitectureError):
        parse_architecture("pool size=2")
    with pytest.raises(ArchitectureError):
        ModelConfig.from_text("gap\ndense units=4\nsoftmax")


@pytest.mark.parametrize("n", [25, 50, 100, 150])
def test_default_model_any_resolution(n):
    m = Model(ModelConfig.default(), seed=0)
    p = m.forward(np.zeros((2, 1, n, n)))
    assert p.shape == (2, 10)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)


def test_forward_deterministic():
    m = Model(ModelConfig.default(), seed=3)
    x = RNG.random((3, 1, 25, 25))
    np.testing.assert_array_equal(m.forward(x), m.forward(x))


def test_flatten_architecture_lazily_sized():
    text = "conv out=4 k=5 pad=valid\nrelu\nmaxpool size=2\nflatten\ndense units=12\nrelu\ndense units=10\nsoftmax\n"
    m = Model(ModelConfig.from_text(text), seed=0)
    assert m.forward(RNG.random((2, 1, 25, 25))).shape == (2, 10)
    assert m.params["4.weight"].shape == (4 * 10 * 10, 12)


def test_gradient_check_linear_model():
    m = Model(ModelConfig.from_text("gap\ndense units=10\nsoftmax"), seed=0)
    x = RNG.normal(size=(3, 1, 4, 4))
    rep = gradient_check(m, x, np.array([1, 2, 3]), tolerance=1e-6)
    assert rep.passed and rep.max_rel_error < 1e-8


def test_gradient_check_small_default():
    m = Model(ModelConfig.default(), seed=1)
    x = RNG.normal(size=(4, 1, 12, 12))
    rep = gradient_check(m, x, np.array([0, 3, 5, 9]), max_entries=24, directions=4)
    assert rep.passed, rep.summary()


def test_gradient_check_catches_corrupt_backward(monkeypatch):
    real = F.conv2d_backward

    def broken(dout, cache, input_grad=True):
        dx, dw, db = real(dout, cache, input_grad)
        return dx, dw * 1.01, db

    monkeypatch.setattr(F, "conv2d_backward", broken)
    m = Model(ModelConfig.default(), seed=1)
    rep = gradient_check(m, RNG.normal(size=(4, 1, 12, 12)), np.array([0, 3, 5, 9]), max_entries=8)
    assert not rep.passed


def test_untrained_loss_near_chance():
    m = Model(ModelConfig.default(), seed=5)
    x = (RNG.random((40, 1, 25, 25)) < 0.3).astype(float)
    loss, _ = F.sparse_ce_loss(m.forward(x, train=True, update_stats=False), np.arange(40) % 10)
    assert abs(loss - math.log(10)) < 0.2


# --- checkpoint -------------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = Model(ModelConfig.default(), seed=9)
    m.buffers["1.running_mean"][:] = RNG.normal(size=16)
    adam = AdamState(lr=3e-4, t=7)
    adam.m["0.weight"] = RNG.normal(size=m.params["0.weight"].shape)
    adam.v["0.weight"] = RNG.random(m.params["0.weight"].shape)
    path = tmp_path / "m.camw"
    checkpoint.save(path, m, {"epoch": 3}, adam)
    assert path.read_bytes()[:4] == b"CAMW"
    back, meta, adam2 = checkpoint.load(path)
    assert meta["epoch"] == "3"
    assert back.config.layers == m.config.layers
    for k, v in m.state().items():
        np.testing.assert_array_equal(back.state()[k], v)
    assert adam2.t == 7 and adam2.lr == 3e-4
    np.testing.assert_array_equal(adam2.m["0.weight"], adam.m["0.weight"])
    x = RNG.random((2, 1, 25, 25))
    np.testing.assert_array_equal(back.forward(x), m.forward(x))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE\x01\x00")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "bad")
    m = Model(ModelConfig.default(), seed=0)
    checkpoint.save(tmp_path / "ok", m)
    (tmp_path / "cut").write_bytes((tmp_path / "ok").read_bytes()[:-100])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "cut")


def test_default_architecture_text_is_documented():
    assert "conv out=16 k=3 pad=same" in DEFAULT_ARCHITECTURE
