"""Layer-level backward correctness and optimizer behavior."""

import numpy as np
import pytest

from trida import nn
from trida.errors import ValidationError

from helpers import directional_grad_check


def _layer_check(layer, shape, train, seed=0, n_dirs=8):
    """FD-check parameter grads and the input gradient of one layer."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    r = None

    def loss():
        nonlocal r
        y, _ = layer.forward(x, train)
        if r is None:
            r = np.random.default_rng(99).standard_normal(y.shape)
        return float((y * r).sum())

    loss()  # sets r
    layer.zero_grad()
    y, cache = layer.forward(x, train)
    dx = layer.backward(r, cache)
    params = [(p, layer.grads[k]) for k, p in layer.params.items()]
    if params:
        worst = directional_grad_check(params, loss, n_dirs=n_dirs)
        assert worst < 1e-6, f"param grad err {worst}"
    # input gradient
    h = 1e-6
    d = rng.standard_normal(x.shape)
    xp, xm = x + h * d, x - h * d
    fp = float((layer.forward(xp, train)[0] * r).sum())
    fm = float((layer.forward(xm, train)[0] * r).sum())
    fd = (fp - fm) / (2 * h)
    assert abs(float((dx * d).sum()) - fd) / max(abs(fd), 1e-12) < 1e-6


def test_conv2d_grads():
    rng = np.random.default_rng(1)
    _layer_check(nn.Conv2d(2, 3, 3, 1, rng), (2, 2, 6, 6), train=True)


def test_linear_grads():
    rng = np.random.default_rng(2)
    _layer_check(nn.Linear(5, 4, rng), (3, 5), train=True)


def test_weightnorm_linear_grads():
    rng = np.random.default_rng(3)
    _layer_check(nn.WeightNormLinear(5, 4, rng), (3, 5), train=True)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm1d_grads(train):
    layer = nn.BatchNorm1d(4)
    # non-trivial running stats and affine parameters
    layer.buffers["running_mean"] += 0.3
    layer.buffers["running_var"] *= 1.7
    layer.params["gamma"] += 0.2
    layer.params["beta"] -= 0.1
    _layer_check(layer, (6, 4), train=train)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm2d_grads(train):
    layer = nn.BatchNorm2d(3)
    layer.buffers["running_var"] *= 0.8
    _layer_check(layer, (4, 3, 5, 5), train=train)


def test_batchnorm_running_stats_update_only_in_train():
    layer = nn.BatchNorm1d(2, momentum=0.5)
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    before = layer.buffers["running_mean"].copy()
    layer.forward(x, train=False)
    np.testing.assert_array_equal(layer.buffers["running_mean"], before)
    layer.forward(x, train=True)
    np.testing.assert_allclose(layer.buffers["running_mean"], [1.0, 2.0])


def test_avgpool_and_flatten_roundtrip():
    pool, flat = nn.AvgPool2d(), nn.Flatten()
    x = np.arange(32, dtype=np.float64).reshape(1, 2, 4, 4)
    y, cache = pool.forward(x, True)
    assert y.shape == (1, 2, 2, 2)
    assert y[0, 0, 0, 0] == pytest.approx(x[0, 0, :2, :2].mean())
    dx = pool.backward(np.ones_like(y), cache)
    np.testing.assert_allclose(dx, 0.25)
    f, fc = flat.forward(x, True)
    assert f.shape == (1, 32)
    assert flat.backward(f, fc).shape == x.shape
    with pytest.raises(ValidationError):
        pool.forward(np.zeros((1, 1, 3, 3)), True)


def test_sequential_input_taps():
    rng = np.random.default_rng(4)
    seq = nn.Sequential([nn.Linear(3, 3, rng), nn.Tanh(), nn.Linear(3, 2, rng)])
    x = rng.standard_normal((2, 3))
    y, caches = seq.forward(x, True)
    tap = rng.standard_normal((2, 3))  # extra grad at input of layer 1 (Tanh)
    dx_plain = seq.backward(np.ones_like(y), caches)
    seq.zero_grad()
    dx_tapped = seq.backward(np.ones_like(y), caches, input_taps={1: tap})
    # the tap propagates through layer 0 only
    delta = dx_tapped - dx_plain
    expected = seq.layers[0].backward(tap, caches[0])
    np.testing.assert_allclose(delta, expected)


def test_sgd_momentum_and_weight_decay():
    p = np.array([1.0])
    g = np.array([0.5])
    opt = nn.SGD({"new": [(p, g)]}, {"new": 0.1}, momentum=0.9, weight_decay=0.0)
    opt.step()
    assert p[0] == pytest.approx(1.0 - 0.1 * 0.5)
    opt.step()  # velocity = 0.9*0.5 + 0.5
    assert p[0] == pytest.approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5))
    with pytest.raises(ValidationError):
        nn.SGD({"new": [(p, g)]}, {"new": -1.0})
    with pytest.raises(ValidationError):
        nn.SGD({"new": [(p, g)]}, {})
