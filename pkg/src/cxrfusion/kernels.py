"""Hot convolution kernels: numba-jitted loops with a pure-numpy fallback.

Convolution forward/backward dominates training time; everything else in the
package is cheap vectorized numpy.  The backend is chosen once at import from
the ``CXRFUSION_BACKEND`` environment variable:

    auto   use numba when importable, else numpy (default)
    numba  require numba, fail loudly if missing
    numpy  force the pure-numpy path

Both paths implement the same zero-padded, strided cross-correlation and are
kept numerically interchangeable to ~1e-12 relative (tested).  Exact float
rounding may differ between backends, so reproducibility guarantees hold per
backend; the CLI echoes the resolved backend into every effective config.

All kernels take the already-padded input ``xp`` of shape (N, C, Hp, Wp) and
a weight tensor (F, C, kh, kw); output is (N, F, Ho, Wo).  No fastmath, no
parallel reduction: summation order is fixed for determinism.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError

_ENV_VAR = "CXRFUSION_BACKEND"

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay runnable
    _HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# pure-numpy path: one einsum per kernel tap, O(kh*kw) vectorized passes
# ---------------------------------------------------------------------------

def _conv2d_forward_numpy(xp, k, stride):
    n, c, hp, wp = xp.shape
    f, _, kh, kw = k.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            window = xp[:, :, a : a + stride * (ho - 1) + 1 : stride,
                        b : b + stride * (wo - 1) + 1 : stride]
            out += np.einsum("nchw,fc->nfhw", window, k[:, :, a, b])
    return out


def _conv2d_grad_input_numpy(g, k, stride, xp_shape):
    n, c, hp, wp = xp_shape
    f, _, kh, kw = k.shape
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros(xp_shape, dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + stride * (ho - 1) + 1 : stride,
                b : b + stride * (wo - 1) + 1 : stride] += np.einsum(
                "nfhw,fc->nchw", g, k[:, :, a, b])
    return dxp


def _conv2d_grad_weights_numpy(xp, g, stride, k_shape):
    f, c, kh, kw = k_shape
    ho, wo = g.shape[2], g.shape[3]
    dk = np.empty(k_shape, dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            window = xp[:, :, a : a + stride * (ho - 1) + 1 : stride,
                        b : b + stride * (wo - 1) + 1 : stride]
            dk[:, :, a, b] = np.einsum("nfhw,nchw->fc", g, window)
    return dk


# ---------------------------------------------------------------------------
# numba path: explicit loops, sequential accumulation
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_numba(xp, k, stride):
        n_n, n_c, hp, wp = xp.shape
        n_f, _, kh, kw = k.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        out = np.zeros((n_n, n_f, ho, wo), dtype=np.float64)
        for n in range(n_n):
            for f in range(n_f):
                for i in range(ho):
                    ii = i * stride
                    for j in range(wo):
                        jj = j * stride
                        acc = 0.0
                        for c in range(n_c):
                            for a in range(kh):
                                for b in range(kw):
                                    acc += xp[n, c, ii + a, jj + b] * k[f, c, a, b]
                        out[n, f, i, j] = acc
        return out

    @njit(cache=True)
    def _conv2d_grad_input_numba(g, k, stride, hp, wp):
        n_n, n_f, ho, wo = g.shape
        _, n_c, kh, kw = k.shape
        dxp = np.zeros((n_n, n_c, hp, wp), dtype=np.float64)
        for n in range(n_n):
            for f in range(n_f):
                for i in range(ho):
                    ii = i * stride
                    for j in range(wo):
                        jj = j * stride
                        gv = g[n, f, i, j]
                        for c in range(n_c):
                            for a in range(kh):
                                for b in range(kw):
                                    dxp[n, c, ii + a, jj + b] += gv * k[f, c, a, b]
        return dxp

    @njit(cache=True)
    def _conv2d_grad_weights_numba(xp, g, stride, kh, kw):
        n_n, n_c, hp, wp = xp.shape
        _, n_f, ho, wo = g.shape
        dk = np.zeros((n_f, n_c, kh, kw), dtype=np.float64)
        for n in range(n_n):
            for f in range(n_f):
                for i in range(ho):
                    ii = i * stride
                    for j in range(wo):
                        jj = j * stride
                        gv = g[n, f, i, j]
                        for c in range(n_c):
                            for a in range(kh):
                                for b in range(kw):
                                    dk[f, c, a, b] += gv * xp[n, c, ii + a, jj + b]
        return dk


def _resolve_backend(requested: str) -> str:
    if requested not in ("auto", "numba", "numpy"):
        raise ConfigError(
            f"{_ENV_VAR} must be one of auto|numba|numpy, got {requested!r}")
    if requested == "numpy":
        return "numpy"
    if requested == "numba" and not _HAVE_NUMBA:
        raise ConfigError(f"{_ENV_VAR}=numba but numba is not importable")
    return "numba" if _HAVE_NUMBA else "numpy"


_backend = _resolve_backend(os.environ.get(_ENV_VAR, "auto"))


def backend_name() -> str:
    """Resolved backend currently dispatching the hot kernels."""
    return _backend


def conv2d_forward(xp: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    if _backend == "numba":
        return _conv2d_forward_numba(xp, k, stride)
    return _conv2d_forward_numpy(xp, k, stride)


def conv2d_grad_input(g: np.ndarray, k: np.ndarray, stride: int,
                      xp_shape: tuple) -> np.ndarray:
    if _backend == "numba":
        return _conv2d_grad_input_numba(g, k, stride, xp_shape[2], xp_shape[3])
    return _conv2d_grad_input_numpy(g, k, stride, xp_shape)


def conv2d_grad_weights(xp: np.ndarray, g: np.ndarray, stride: int,
                        k_shape: tuple) -> np.ndarray:
    if _backend == "numba":
        return _conv2d_grad_weights_numba(xp, g, stride, k_shape[2], k_shape[3])
    return _conv2d_grad_weights_numpy(xp, g, stride, k_shape)


@contextmanager
def use_backend(name: str):
    """Temporarily switch kernel backend (tests and benchmarks)."""
    global _backend
    previous = _backend
    _backend = _resolve_backend(name)
    try:
        yield
    finally:
        _backend = previous
