import warnings

import numpy as np
import pytest

from hyqal.errors import ShapeError
from hyqal.tensorcore import (
    AdamState,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    GlobalMaxPool,
    L2Normalize,
    MaxPool,
    ReLU,
    Sequential,
    adam_step,
)
from oracles import central_difference

FD_TOL = 1e-5


def _check_layer(layer, x, rng, tol=FD_TOL):
    """Analytic input and parameter gradients of sum(w * layer(x)) vs central differences."""
    y = layer.forward(x)
    w = rng.normal(size=y.shape)
    layer.zero_grad()
    gx = layer.backward(w)
    assert gx.shape == x.shape

    def f():
        return float(np.sum(w * layer.forward(x)))

    assert np.max(np.abs(gx - central_difference(f, x))) < tol
    for name, p in layer.params.items():
        num = central_difference(f, p)
        assert np.max(np.abs(layer.grads[name] - num)) < tol, name


def _offgrid(rng, shape):
    # keep inputs away from ReLU/max kinks so finite differences are smooth
    x = rng.normal(size=shape)
    return x + 0.1 * np.sign(x)


@pytest.mark.parametrize("shape", [(5,), (3, 5), (7, 5)])
def test_dense_fd(rng, shape):
    _check_layer(Dense(5, 4, rng=rng), rng.normal(size=shape), rng)


@pytest.mark.parametrize("shape", [(4,), (2, 6), (3, 2, 4)])
def test_relu_fd(rng, shape):
    _check_layer(ReLU(), _offgrid(rng, shape), rng)


@pytest.mark.parametrize("shape,stride,padding,k", [
    ((2, 1, 5, 5), 1, 1, 3), ((1, 2, 6, 7), 2, 1, 3), ((3, 2, 4, 4), 1, 0, 2),
])
def test_conv2d_fd(rng, shape, stride, padding, k):
    layer = Conv2D(shape[1], 3, k, stride, padding, rng=rng)
    _check_layer(layer, rng.normal(size=shape), rng)


@pytest.mark.parametrize("shape", [(6, 3), (4, 3, 2, 2), (2, 3, 3, 1)])
def test_batchnorm_fd_eval(rng, shape):
    bn = BatchNorm(3)
    bn.running_mean = rng.normal(size=3)
    bn.running_var = rng.uniform(0.5, 2.0, size=3)
    bn.params["gamma"][:] = rng.normal(size=3)
    bn.params["beta"][:] = rng.normal(size=3)
    bn.eval()
    _check_layer(bn, rng.normal(size=shape), rng)


@pytest.mark.parametrize("shape", [(6, 3), (4, 3, 2, 2)])
def test_batchnorm_fd_train(rng, shape):
    bn = BatchNorm(3)
    bn.params["gamma"][:] = rng.normal(size=3)
    _check_layer(bn, rng.normal(size=shape), rng, tol=1e-5)


@pytest.mark.parametrize("shape", [(4,), (3, 6), (2, 5)])
def test_dropout_fd(rng, shape):
    d = Dropout(0.3, np.random.default_rng(0)).eval()
    _check_layer(d, rng.normal(size=shape), rng)
    d.train()
    x = rng.normal(size=shape)
    y = d.forward(x)
    mask = y != 0
    g = d.backward(np.ones(shape))
    assert np.allclose(g[mask], 1 / 0.7) and np.all(g[~mask] == 0)


@pytest.mark.parametrize("shape", [(3,), (4, 3), (2, 7)])
def test_l2normalize_fd(rng, shape):
    _check_layer(L2Normalize(), rng.normal(size=shape), rng)


@pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 1, 5, 3), (3, 2, 1, 1)])
def test_globalavgpool_fd(rng, shape):
    _check_layer(GlobalAvgPool(), rng.normal(size=shape), rng)


@pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 1, 5, 3), (3, 2, 2, 2)])
def test_globalmaxpool_fd(rng, shape):
    _check_layer(GlobalMaxPool(), rng.normal(size=shape), rng)


@pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 1, 5, 3), (3, 2, 6, 2)])
def test_maxpool_fd(rng, shape):
    _check_layer(MaxPool(2), rng.normal(size=shape), rng)


def test_sequential_fd(rng):
    net = Sequential([Conv2D(1, 2, 3, 2, 1, rng=rng), ReLU(), GlobalAvgPool(), Dense(2, 3, rng=rng)])
    x = rng.normal(size=(2, 1, 6, 6))
    y = net.forward(x)
    w = rng.normal(size=y.shape)
    net.zero_grad()
    gx = net.backward(w)

    def f():
        return float(np.sum(w * net.forward(x)))

    assert np.max(np.abs(gx - central_difference(f, x))) < FD_TOL
    for name, p, grads, key in net.named_parameters():
        assert np.max(np.abs(grads[key] - central_difference(f, p))) < FD_TOL, name


def test_first_conv_skips_input_grad(rng):
    conv = Conv2D(1, 2, rng=rng, input_grad=False)
    conv.forward(rng.normal(size=(1, 1, 4, 4)))
    assert conv.backward(np.ones((1, 2, 4, 4))) is None
    assert np.any(conv.grads["W"] != 0)


# -- examples ---------------------------------------------------------------
def test_relu_examples():
    r = ReLU()
    assert np.array_equal(r.forward([-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])
    r.forward([-1.0, 2.0])
    assert np.array_equal(r.backward([1.0, 1.0]), [0.0, 1.0])


def test_dense_identity_and_transpose(rng):
    d = Dense(3, 3)
    d.params["W"][:] = np.eye(3)
    v = rng.normal(size=3)
    assert np.array_equal(d.forward(v), v)
    d.params["W"][:] = rng.normal(size=(3, 3))
    d.forward(v)
    g = rng.normal(size=3)
    assert np.allclose(d.backward(g), d.params["W"].T @ g)


def test_l2normalize_examples(rng):
    assert np.allclose(L2Normalize().forward([3.0, 4.0]), [0.6, 0.8])
    x = rng.normal(size=(50, 9)) * rng.uniform(1e-3, 1e3, size=(50, 1))
    norms = np.linalg.norm(L2Normalize().forward(x), axis=1)
    assert np.max(np.abs(norms - 1)) < 1e-12


def test_l2normalize_zero_vector_warns():
    with pytest.warns(RuntimeWarning):
        y = L2Normalize().forward(np.zeros((2, 3)))
    assert np.array_equal(y, np.zeros((2, 3)))


def test_backward_before_forward():
    for layer in (Dense(2, 2), ReLU(), Conv2D(1, 1), BatchNorm(2), Dropout(0.3), L2Normalize(),
                  GlobalAvgPool(), GlobalMaxPool(), MaxPool()):
        with pytest.raises(RuntimeError, match="before forward"):
            layer.backward(np.zeros(2))


def test_shape_errors_name_layer():
    with pytest.raises(ShapeError, match="dense"):
        Dense(3, 2).forward(np.zeros(4))
    with pytest.raises(ShapeError, match="conv2d"):
        Conv2D(2, 1).forward(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError, match="batchnorm"):
        BatchNorm(3).forward(np.zeros((4, 2)))


def test_batchnorm_train_statistics(rng):
    # eps = 1e-5 shrinks the variance by var / (var + eps); large-variance input keeps that below 1e-6
    for shape in [(64, 4), (8, 4, 5, 5)]:
        x = rng.normal(3.0, 50.0, size=shape)
        bn = BatchNorm(4)
        y = bn.forward(x)
        axes = (0,) if len(shape) == 2 else (0, 2, 3)
        assert np.max(np.abs(y.mean(axis=axes))) < 1e-9
        assert np.max(np.abs(y.var(axis=axes) - 1)) < 1e-6


def test_batchnorm_running_stats_update(rng):
    bn = BatchNorm(2)
    x = rng.normal(5.0, 2.0, size=(100, 2))
    bn.forward(x)
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0))


def test_eval_mode_deterministic(rng):
    x = rng.normal(size=(4, 3))
    for layer in (Dropout(0.5, np.random.default_rng(1)), BatchNorm(3)):
        layer.eval()
        assert np.array_equal(layer.forward(x), layer.forward(x))
    assert np.array_equal(Dropout(0.5).eval().forward(x), x)


def test_dropout_fraction():
    p = 0.3
    d = Dropout(p, np.random.default_rng(7))
    y = d.forward(np.ones(10_000))
    frac = np.mean(y == 0)
    assert abs(frac - p) < 0.05
    assert np.allclose(y[y != 0], 1 / (1 - p))


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = {"w": np.array([0.5])}
    st = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([1.0])}, st)
    # bias-corrected m/sqrt(v) is exactly 1 on the first step, up to eps
    assert abs(p["w"][0] - 0.4) < 1e-6
    assert st.step == 1
    assert st.m["w"].shape == p["w"].shape and st.v["w"].shape == p["w"].shape


def test_adam_reference_sequence(rng):
    grads = rng.normal(size=(5, 3))
    p = {"w": np.zeros(3)}
    st = AdamState(lr=0.01)
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_step(p, {"w": g.copy()}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], ref, rtol=0, atol=1e-15)


def test_adam_deterministic(rng):
    g = rng.normal(size=(10, 4))

    def run():
        p = {"w": np.ones(4)}
        st = AdamState()
        for gi in g:
            adam_step(p, {"w": gi}, st)
        return p["w"]

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_no_warnings_on_normal_input(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        L2Normalize().forward(rng.normal(size=(3, 4)))
