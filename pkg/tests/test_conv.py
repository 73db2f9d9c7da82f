"""Convolution ops against brute-force nested-loop oracles."""

import numpy as np
import pytest

from crossres import nnops
from crossres.tensor import ShapeError, Tape, Tensor, mean_all


def conv2d_oracle(x, w, b, stride, padding, dilation):
    """Direct six-nested-loop convolution in float64."""
    n, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (ww + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    y = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += (xp[ni, ci, i * stride + a * dilation,
                                           j * stride + bb * dilation]
                                        * float(w[co, ci, a, bb]))
                    y[ni, co, i, j] = acc + (float(b[co]) if b is not None else 0.0)
    return y


def conv_transpose2d_oracle(x, w, b, stride, padding):
    """Scatter-accumulate (overlap-add) transposed convolution in float64."""
    n, cin, h, ww = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (ww - 1) * stride - 2 * padding + kw
    buf = np.zeros((n, cout, oh + 2 * padding, ow + 2 * padding))
    for ni in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(ww):
                    for co in range(cout):
                        for a in range(kh):
                            for bb in range(kw):
                                buf[ni, co, i * stride + a, j * stride + bb] += (
                                    float(x[ni, ci, i, j]) * float(w[ci, co, a, bb]))
    out = buf[:, :, padding : padding + oh, padding : padding + ow]
    if b is not None:
        out = out + np.asarray(b, np.float64)[None, :, None, None]
    return out


def test_conv_1x1_affine_map():
    x = Tensor(np.array([[[[3.0]]]], np.float32))
    w = Tensor(np.array([[[[2.0]]]], np.float32))
    b = Tensor(np.array([1.0], np.float32))
    y = nnops.conv2d(x, w, b)
    assert y.data.reshape(-1)[0] == 7.0


def test_conv_sum_of_ones():
    x = Tensor(np.ones((1, 1, 3, 3), np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), np.float32))
    y = nnops.conv2d(x, w, None, stride=1, padding=0)
    assert y.shape == (1, 1, 1, 1)
    assert y.data.reshape(-1)[0] == 9.0


def test_identity_kernel_is_exact_identity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 9)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    y = nnops.conv2d(Tensor(x), Tensor(w), None)
    assert np.array_equal(y.data, x)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2)])
def test_conv2d_matches_bruteforce(seed, stride, padding, dilation):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    y = nnops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation)
    ref = conv2d_oracle(x, w, b, stride, padding, dilation)
    assert np.allclose(y.data, ref, atol=1e-5)


def test_conv_transpose_single_pixel_scatter():
    for v in (0.5, -2.0):
        x = Tensor(np.full((1, 1, 1, 1), v, np.float32))
        w = Tensor(np.ones((1, 1, 2, 2), np.float32))
        y = nnops.conv_transpose2d(x, w, None, stride=2, padding=0)
        assert y.shape == (1, 1, 2, 2)
        assert np.allclose(y.data, v)


def test_conv_transpose_doubles_spatial_size():
    x = Tensor(np.random.rand(1, 16, 64, 64).astype(np.float32))
    w = Tensor(np.random.rand(16, 8, 4, 4).astype(np.float32))
    y = nnops.conv_transpose2d(x, w, None, stride=2, padding=1)
    assert y.shape == (1, 8, 128, 128)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0)])
def test_conv_transpose_matches_scatter_oracle(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
    w = rng.standard_normal((2, 3, 2, 2)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    y = nnops.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    ref = conv_transpose2d_oracle(x, w, b, stride, padding)
    assert np.allclose(y.data, ref, atol=1e-5)


def test_conv_transpose_input_grad_equals_forward_conv():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
    with Tape() as tape:
        y = nnops.conv_transpose2d(x, w, None, stride=2, padding=1)
        tape.backward(mean_all(y))
    # upstream grad is uniform 1/numel; conv of it with the same weight
    g = np.full(y.shape, 1.0 / y.data.size, np.float32)
    ref = nnops.conv2d(Tensor(g), w, None, stride=2, padding=1)
    assert np.allclose(x.grad, ref.data, atol=1e-6)


def test_conv_shape_errors_name_axis():
    x = Tensor(np.zeros((1, 3, 8, 8), np.float32))
    w = Tensor(np.zeros((4, 2, 3, 3), np.float32))
    with pytest.raises(ShapeError, match="axis 1"):
        nnops.conv2d(x, w)
    with pytest.raises(ShapeError, match="does not fit"):
        nnops.conv2d(Tensor(np.zeros((1, 2, 2, 2), np.float32)),
                     Tensor(np.zeros((1, 2, 3, 3), np.float32)))
    with pytest.raises(ShapeError, match="axis 1"):
        nnops.conv_transpose2d(x, Tensor(np.zeros((2, 4, 2, 2), np.float32)))
