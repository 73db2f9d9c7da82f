"""Layer primitives: convolutions, resize, softmax, normalization.

Convolutions run as im2col + BLAS matmul; the column matrix is kept for the
weight gradient. Resizing is two small interpolation matrices applied to the
row and column axes, so the backward pass is the exact adjoint (transposed
matrices). Resize interpolation is computed in float64 and cast back, which
keeps constant images exactly constant through up/down round trips.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, _record, as_tensor


def _conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    n, c, h, w = x.shape
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    buf[:, :, padding : padding + h, padding : padding + w] = x
    return buf


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            out_h: int, out_w: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (C*kh*kw, N*out_h*out_w) column matrix.

    Channel-major rows and batch-major columns make the convolution a single
    GEMM and let both backward GEMMs run on plain transposed views.
    """
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, out_h, out_w),
        strides=(s1, s2 * dilation, s3 * dilation, s0, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, n * out_h * out_w)


def _col2im_add(cols: np.ndarray, n: int, c: int, hp: int, wp: int, kh: int, kw: int,
                stride: int, dilation: int, out_h: int, out_w: int, dtype) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns into a (C,N,Hp,Wp) buffer.

    For stride > 1 the accumulation runs in a stride-phase-major layout so
    every += touches contiguous memory, then one transpose reassembles the
    spatial grid.
    """
    cols6 = cols.reshape(c, kh, kw, n, out_h, out_w)
    if stride == 1:
        buf = np.zeros((c, n, hp, wp), dtype=dtype)
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                buf[:, :, hi : hi + out_h, wj : wj + out_w] += cols6[:, i, j]
        return buf
    s = stride
    hq, wq = -(-hp // s), -(-wp // s)
    phased = np.zeros((c, n, s, s, hq, wq), dtype=dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            phased[:, :, hi % s, wj % s,
                   hi // s : hi // s + out_h,
                   wj // s : wj // s + out_w] += cols6[:, i, j]
    buf = phased.transpose(0, 1, 4, 2, 5, 3).reshape(c, n, hq * s, wq * s)
    return buf[:, :, :hp, :wp]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation over (N,C,H,W) input with (Cout,Cin,kh,kw) weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (N,C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (Cout,Cin,kh,kw), got {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d: input channels (axis 1) = {c} do not match weight Cin = {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({cout},) (axis 0)")
    out_h = _conv_out_size(h, kh, stride, padding, dilation)
    out_w = _conv_out_size(w, kw, stride, padding, dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} "
            f"with stride={stride} padding={padding} dilation={dilation}"
        )

    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and dilation == 1:
        return _conv1x1(x, weight, bias)

    xp = _pad_hw(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    y2 = np.matmul(w2, cols)
    if bias is not None:
        y2 += bias.data[:, None]
    out = Tensor(np.ascontiguousarray(
        y2.reshape(cout, n, out_h, out_w).transpose(1, 0, 2, 3)))

    def backward(g: np.ndarray) -> None:
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        if bias is not None and bias._tracked:
            bias.accumulate_grad(g2.sum(axis=1), own=True)
        if weight._tracked:
            weight.accumulate_grad(np.matmul(g2, cols.T).reshape(weight.shape), own=True)
        if x._tracked:
            gcols = np.matmul(w2.T, g2)
            gxp = _col2im_add(gcols, n, c, xp.shape[2], xp.shape[3], kh, kw,
                              stride, dilation, out_h, out_w, x.dtype)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] \
                if padding else gxp
            x.accumulate_grad(np.ascontiguousarray(gx.transpose(1, 0, 2, 3)), own=True)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    _record(out, inputs, backward)
    return out


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Pointwise convolution as a batched channel matmul, no column matrix."""
    n, c, h, w = x.shape
    cout = weight.shape[0]
    w2 = weight.data.reshape(cout, c)
    x3 = x.data.reshape(n, c, h * w)
    y = np.matmul(w2, x3)
    if bias is not None:
        y += bias.data[:, None]
    out = Tensor(y.reshape(n, cout, h, w))

    def backward(g: np.ndarray) -> None:
        g3 = g.reshape(n, cout, h * w)
        if bias is not None and bias._tracked:
            bias.accumulate_grad(g3.sum(axis=(0, 2)), own=True)
        if weight._tracked:
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(weight.shape), own=True)
        if x._tracked:
            x.accumulate_grad(np.matmul(w2.T, g3).reshape(n, c, h, w), own=True)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    _record(out, inputs, backward)
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; weight is (Cin,Cout,kh,kw). Output (H-1)*s - 2p + k."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv_transpose2d: input and weight must be 4-D")
    if stride < 1 or padding < 0:
        raise ValueError("conv_transpose2d: stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    cin, cout, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(
            f"conv_transpose2d: input channels (axis 1) = {c} do not match weight Cin = {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} must be ({cout},)")
    out_h = (h - 1) * stride - 2 * padding + kh
    out_w = (w - 1) * stride - 2 * padding + kw
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv_transpose2d: output {out_h}x{out_w} collapsed "
            f"(input {h}x{w}, kernel {kh}x{kw}, stride={stride}, padding={padding})"
        )

    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, -1)
    wmat = weight.data.reshape(cin, cout * kh * kw)
    cols = np.matmul(wmat.T, x2)
    buf = _col2im_add(cols, n, cout, out_h + 2 * padding, out_w + 2 * padding,
                      kh, kw, stride, 1, h, w, x.dtype)
    y = buf[:, :, padding : padding + out_h, padding : padding + out_w] if padding else buf
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    if bias is not None:
        y += bias.data[None, :, None, None]
    out = Tensor(y)

    def backward(g: np.ndarray) -> None:
        if bias is not None and bias._tracked:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)), own=True)
        gp = _pad_hw(g, padding)
        gcols = _im2col(gp, kh, kw, stride, 1, h, w)
        if weight._tracked:
            weight.accumulate_grad(np.matmul(x2, gcols.T).reshape(weight.shape), own=True)
        if x._tracked:
            # adjoint of the scatter: a plain convolution of g with the same weight
            gx2 = np.matmul(wmat, gcols)
            x.accumulate_grad(np.ascontiguousarray(
                gx2.reshape(cin, n, h, w).transpose(1, 0, 2, 3)), own=True)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    _record(out, inputs, backward)
    return out


# -- resize -------------------------------------------------------------------


def _cubic_weight(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    s = np.abs(s)
    w = np.where(
        s <= 1.0,
        (a + 2.0) * s**3 - (a + 3.0) * s**2 + 1.0,
        np.where(s < 2.0, a * (s**3 - 5.0 * s**2 + 8.0 * s - 4.0), 0.0),
    )
    return w


@lru_cache(maxsize=256)
def _resize_matrix(in_size: int, out_size: int, mode: str) -> np.ndarray:
    """(out_size, in_size) float64 interpolation matrix, half-pixel centers."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    if mode == "nearest":
        idx = np.clip(np.floor(centers + 0.5).astype(np.int64), 0, in_size - 1)
        m[np.arange(out_size), idx] = 1.0
        return m
    if mode == "bilinear":
        i0 = np.floor(centers).astype(np.int64)
        t = centers - i0
        taps, weights = (i0, i0 + 1), (1.0 - t, t)
    elif mode == "bicubic":
        i0 = np.floor(centers).astype(np.int64)
        taps = tuple(i0 + k for k in (-1, 0, 1, 2))
        weights = tuple(_cubic_weight(centers - p) for p in taps)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    rows = np.arange(out_size)
    for tap, w in zip(taps, weights):
        np.add.at(m, (rows, np.clip(tap, 0, in_size - 1)), w)
    return m


def _nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    return np.clip(np.floor(centers + 0.5).astype(np.int64), 0, in_size - 1)


def _apply_resize(data: np.ndarray, rh: np.ndarray, rw: np.ndarray, dtype) -> np.ndarray:
    n, c, h, w = data.shape
    t = data.reshape(n * c, h, w).astype(np.float64, copy=False)
    t = np.matmul(t, rw.T)
    t = np.matmul(rh, t)
    return t.reshape(n, c, rh.shape[0], rw.shape[0]).astype(dtype, copy=False)


def resize(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    """Resample (N,C,H,W) to (N,C,out_h,out_w); align-corners off for all modes."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"resize: input must be 4-D, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("resize: output size must be >= 1")
    n, c, h, w = x.shape
    rh = _resize_matrix(h, out_h, mode)
    rw = _resize_matrix(w, out_w, mode)
    out = Tensor(_apply_resize(x.data, rh, rw, x.dtype))

    def backward(g: np.ndarray) -> None:
        if x._tracked:
            x.accumulate_grad(_apply_resize(g, rh.T, rw.T, x.dtype), own=True)

    _record(out, (x,), backward)
    return out


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize for integer label maps (..., H, W)."""
    hi = _nearest_indices(labels.shape[-2], out_h)
    wi = _nearest_indices(labels.shape[-1], out_w)
    return labels[..., hi[:, None], wi[None, :]]


# -- normalization / softmax --------------------------------------------------


def log_softmax_channel(x: Tensor) -> Tensor:
    """Log-softmax over the channel axis of (N,C,H,W), max-subtracted."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"log_softmax_channel: need (N,C>=2,H,W), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def backward(g: np.ndarray) -> None:
        if x._tracked:
            x.accumulate_grad(g - np.exp(y) * g.sum(axis=1, keepdims=True), own=True)

    _record(out, (x,), backward)
    return out


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over channels; exp of log_softmax for stability."""
    x = as_tensor(x)
    logp = log_softmax_channel(x)
    p = np.exp(logp.data)
    out = Tensor(p)

    def backward(g: np.ndarray) -> None:
        if logp._tracked:
            logp.accumulate_grad(g * p, own=True)

    _record(out, (logp,), backward)
    return out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each (sample, channel) plane to zero mean, unit variance."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 2:
        raise ShapeError("instance_norm: spatial size H*W must be >= 2")
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    invstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xn = (x.data - mean) * invstd
    out = Tensor(xn)
    m = h * w

    def backward(g: np.ndarray) -> None:
        if x._tracked:
            gm = g.mean(axis=(2, 3), keepdims=True)
            gxn = (g * xn).mean(axis=(2, 3), keepdims=True)
            x.accumulate_grad(invstd * (g - gm - xn * gxn), own=True)

    _record(out, (x,), backward)
    return out


def nll_2d(logp: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean negative log-likelihood of integer labels under (N,C,H,W) log-probs."""
    logp = as_tensor(logp)
    n, c, h, w = logp.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"nll_2d: labels shape {labels.shape} does not match log-probs {(n, h, w)}"
        )
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        value = int(labels[bad][0])
        raise ValueError(f"nll_2d: label value {value} outside [0, {c - 1}]")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("nll_2d: no valid (non-ignored) pixels in batch")
    idx = np.where(valid, labels, 0).astype(np.int64)
    taken = np.take_along_axis(logp.data, idx[:, None], axis=1)[:, 0]
    loss = -(taken * valid).sum() / count
    out = Tensor(np.asarray(loss, dtype=logp.dtype))

    def backward(g: np.ndarray) -> None:
        if logp._tracked:
            gl = np.zeros_like(logp.data)
            contrib = (-(g / count) * valid).astype(logp.dtype)[:, None]
            np.put_along_axis(gl, idx[:, None], contrib, axis=1)
            logp.accumulate_grad(gl, own=True)

    _record(out, (logp,), backward)
    return out


def argmax_channel(x: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels -> (N,H,W) int64 label map."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return data.argmax(axis=1)
