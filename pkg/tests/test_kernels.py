"""Backend agreement and correctness of the convolution kernels."""

import numpy as np
import pytest

from trida import kernels


@pytest.fixture
def restore_backend():
    previous = kernels.active_backend()
    yield
    kernels.set_backend(previous)


def _random_case(rng, n=3, c_in=4, c_out=5, side=9, k=3, pad=1):
    x = rng.standard_normal((n, c_in, side, side))
    w = rng.standard_normal((c_out, c_in, k, k))
    dy = rng.standard_normal((n, c_out, side + 2 * pad - k + 1,
                              side + 2 * pad - k + 1))
    return x, w, dy


def test_backends_agree(restore_backend):
    rng = np.random.default_rng(0)
    for pad in (0, 1, 2):
        x, w, dy = _random_case(rng, pad=pad)
        outs = {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            outs[backend] = (
                kernels.conv2d_forward(x, w, pad),
                kernels.conv2d_backward_input(dy, w, pad, x.shape[2], x.shape[3]),
                kernels.conv2d_backward_weight(x, dy, w.shape[2], pad),
            )
        for a, b in zip(outs["numpy"], outs["numba"]):
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_forward_matches_direct_correlation(restore_backend):
    # tiny case against a literal python correlation
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    pad = 1
    expected = np.zeros((1, 3, 4, 4))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for co in range(3):
        for ho in range(4):
            for wo in range(4):
                expected[0, co, ho, wo] = (
                    xp[0, :, ho:ho + 3, wo:wo + 3] * w[co]).sum()
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        np.testing.assert_allclose(kernels.conv2d_forward(x, w, pad), expected,
                                   atol=1e-12)


def test_backward_matches_finite_differences(restore_backend):
    rng = np.random.default_rng(2)
    x, w, r = _random_case(rng, n=2, c_in=2, c_out=3, side=5)
    h = 1e-6
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)

        def loss_w(wv):
            return float((kernels.conv2d_forward(x, wv, 1) * r).sum())

        gw = kernels.conv2d_backward_weight(x, r, 3, 1)
        d = rng.standard_normal(w.shape)
        fd = (loss_w(w + h * d) - loss_w(w - h * d)) / (2 * h)
        assert abs(float((gw * d).sum()) - fd) / abs(fd) < 1e-7

        def loss_x(xv):
            return float((kernels.conv2d_forward(xv, w, 1) * r).sum())

        gx = kernels.conv2d_backward_input(r, w, 1, 5, 5)
        dx = rng.standard_normal(x.shape)
        fd = (loss_x(x + h * dx) - loss_x(x - h * dx)) / (2 * h)
        assert abs(float((gx * dx).sum()) - fd) / abs(fd) < 1e-7


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("tpu")
