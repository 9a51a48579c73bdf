"""Numba and numpy kernel paths must be numerically interchangeable."""

import numpy as np
import pytest

from cxrfusion import kernels
from cxrfusion.tensor import Tensor, conv2d

CASES = [
    # (n, c_in, h, w, c_out, k, stride)
    (2, 1, 8, 8, 4, 3, 1),
    (3, 4, 9, 7, 2, 3, 2),
    (1, 2, 5, 5, 3, 1, 1),
    (2, 3, 12, 12, 5, 5, 3),
]


def _random_case(case, seed):
    n, c_in, h, w, c_out, k, stride = case
    g = np.random.default_rng(seed)
    xp = g.normal(size=(n, c_in, h, w))
    kern = g.normal(size=(c_out, c_in, k, k))
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    grad = g.normal(size=(n, c_out, ho, wo))
    return xp, kern, grad, stride


@pytest.mark.parametrize("case", CASES)
def test_forward_paths_agree(case):
    xp, kern, _, stride = _random_case(case, 1)
    ref = kernels._conv2d_forward_numpy(xp, kern, stride)
    with kernels.use_backend("numpy"):
        a = kernels.conv2d_forward(xp, kern, stride)
    assert np.array_equal(a, ref)
    if kernels._HAVE_NUMBA:
        with kernels.use_backend("numba"):
            b = kernels.conv2d_forward(xp, kern, stride)
        np.testing.assert_allclose(b, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("case", CASES)
def test_backward_paths_agree(case):
    if not kernels._HAVE_NUMBA:
        pytest.skip("numba unavailable")
    xp, kern, grad, stride = _random_case(case, 2)
    with kernels.use_backend("numpy"):
        dx_np = kernels.conv2d_grad_input(grad, kern, stride, xp.shape)
        dk_np = kernels.conv2d_grad_weights(xp, grad, stride, kern.shape)
    with kernels.use_backend("numba"):
        dx_nb = kernels.conv2d_grad_input(grad, kern, stride, xp.shape)
        dk_nb = kernels.conv2d_grad_weights(xp, grad, stride, kern.shape)
    np.testing.assert_allclose(dx_nb, dx_np, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(dk_nb, dk_np, rtol=1e-12, atol=1e-12)


def test_backend_name_is_resolved():
    assert kernels.backend_name() in ("numba", "numpy")


def test_use_backend_restores_previous():
    before = kernels.backend_name()
    with kernels.use_backend("numpy"):
        assert kernels.backend_name() == "numpy"
    assert kernels.backend_name() == before


def test_conv_op_same_result_both_backends():
    if not kernels._HAVE_NUMBA:
        pytest.skip("numba unavailable")
    g = np.random.default_rng(3)
    x = g.normal(size=(2, 2, 8, 8))
    k = g.normal(size=(3, 2, 3, 3))
    with kernels.use_backend("numpy"):
        a = conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
    with kernels.use_backend("numba"):
        b = conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
