"""Hot numeric kernels: stride-1 2D convolution forward/backward.

Two interchangeable implementations are provided:

* ``numba`` -- direct-loop kernels compiled with ``@njit`` (serial, no
  fastmath, so results are deterministic run to run);
* ``numpy`` -- im2col + BLAS matmul fallback that needs no compiler.

The active backend is chosen once at import from the ``TRIDA_BACKEND``
environment variable (``numba`` or ``numpy``; default ``numba`` when
importable) and can be switched at runtime with :func:`set_backend`.
Both paths implement the same contract and agree to float64 roundoff;
``benchmarks/bench_kernels.py`` times them against each other.

All kernels assume stride 1 and square kernels; ``pad`` is symmetric
zero padding.  Inputs are ``float64`` arrays shaped ``(N, C, H, W)``.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# ---------------------------------------------------------------------------
# numpy (im2col) path
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Return patches shaped (N, H_out, W_out, C, k, k) for stride-1 conv."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # sliding_window_view -> (N, C, H_out, W_out, k, k)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5))


def conv2d_forward_numpy(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    n, _, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    h_out, w_out = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    cols = _im2col(x, k, pad).reshape(n * h_out * w_out, c_in * k * k)
    y = cols @ w.reshape(c_out, -1).T
    return y.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)


def conv2d_backward_input_numpy(dy: np.ndarray, w: np.ndarray, pad: int,
                                h: int, wd: int) -> np.ndarray:
    # Transposed convolution == correlation of dy with spatially flipped,
    # channel-swapped weights, padded by (k - 1 - pad).
    k = w.shape[2]
    w_flip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dx = conv2d_forward_numpy(dy, w_flip, k - 1 - pad)
    assert dx.shape[2] == h and dx.shape[3] == wd
    return dx


def conv2d_backward_weight_numpy(x: np.ndarray, dy: np.ndarray,
                                 k: int, pad: int) -> np.ndarray:
    n, c_in = x.shape[0], x.shape[1]
    c_out = dy.shape[1]
    h_out, w_out = dy.shape[2], dy.shape[3]
    cols = _im2col(x, k, pad).reshape(n * h_out * w_out, c_in * k * k)
    dy2 = dy.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
    dw = dy2.T @ cols
    return dw.reshape(c_out, c_in, k, k)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


@njit(cache=True)
def _pad_nb(x, pad):  # pragma: no cover - exercised via wrappers
    n, c, h, wd = x.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    return xp


@njit(cache=True)
def _conv2d_forward_nb(x, w, pad):  # pragma: no cover - exercised via wrapper
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    h_out = h + 2 * pad - k + 1
    w_out = wd + 2 * pad - k + 1
    xp = _pad_nb(x, pad)
    y = np.zeros((n, c_out, h_out, w_out))
    for ni in range(n):
        for co in range(c_out):
            for ci in range(c_in):
                for ki in range(k):
                    for kj in range(k):
                        wv = w[co, ci, ki, kj]
                        for ho in range(h_out):
                            for wo in range(w_out):
                                y[ni, co, ho, wo] += wv * xp[ni, ci, ho + ki, wo + kj]
    return y


@njit(cache=True)
def _conv2d_backward_input_nb(dy, w, pad, h, wd):  # pragma: no cover
    n, c_out, h_out, w_out = dy.shape
    _, c_in, k, _ = w.shape
    dxp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad))
    for ni in range(n):
        for co in range(c_out):
            for ci in range(c_in):
                for ki in range(k):
                    for kj in range(k):
                        wv = w[co, ci, ki, kj]
                        for ho in range(h_out):
                            for wo in range(w_out):
                                dxp[ni, ci, ho + ki, wo + kj] += wv * dy[ni, co, ho, wo]
    return dxp[:, :, pad:pad + h, pad:pad + wd]


@njit(cache=True)
def _conv2d_backward_weight_nb(x, dy, k, pad):  # pragma: no cover
    n, c_in, h, wd = x.shape
    _, c_out, h_out, w_out = dy.shape
    xp = _pad_nb(x, pad)
    dw = np.zeros((c_out, c_in, k, k))
    for ni in range(n):
        for co in range(c_out):
            for ci in range(c_in):
                for ki in range(k):
                    for kj in range(k):
                        acc = 0.0
                        for ho in range(h_out):
                            for wo in range(w_out):
                                acc += xp[ni, ci, ho + ki, wo + kj] * dy[ni, co, ho, wo]
                        dw[co, ci, ki, kj] += acc
    return dw


def conv2d_forward_numba(x, w, pad):
    return _conv2d_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), pad)


def conv2d_backward_input_numba(dy, w, pad, h, wd):
    return _conv2d_backward_input_nb(np.ascontiguousarray(dy),
                                     np.ascontiguousarray(w), pad, h, wd)


def conv2d_backward_weight_numba(x, dy, k, pad):
    return _conv2d_backward_weight_nb(np.ascontiguousarray(x),
                                      np.ascontiguousarray(dy), k, pad)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_BACKENDS = {
    "numpy": (conv2d_forward_numpy, conv2d_backward_input_numpy,
              conv2d_backward_weight_numpy),
}
if HAS_NUMBA:
    _BACKENDS["numba"] = (conv2d_forward_numba, conv2d_backward_input_numba,
                          conv2d_backward_weight_numba)

_active = os.environ.get("TRIDA_BACKEND", "numba" if HAS_NUMBA else "numpy").lower()
if _active not in _BACKENDS:
    raise RuntimeError(
        f"TRIDA_BACKEND={_active!r} not available; choose from {sorted(_BACKENDS)}")


def set_backend(name: str) -> None:
    """Switch the kernel backend at runtime (``numpy`` or ``numba``)."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active = name


def active_backend() -> str:
    return _active


def conv2d_forward(x, w, pad):
    return _BACKENDS[_active][0](x, w, pad)


def conv2d_backward_input(dy, w, pad, h, wd):
    return _BACKENDS[_active][1](dy, w, pad, h, wd)


def conv2d_backward_weight(x, dy, k, pad):
    return _BACKENDS[_active][2](x, dy, k, pad)
