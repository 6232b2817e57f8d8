"""Dense tensor kernels: forward and backward passes for the layer types the
cascade networks need (valid cross-correlation, ceil-mode max pooling, PReLU,
fully connected, channel softmax).

All functions are pure and operate on numpy arrays in NCHW layout (or (N, D)
for fully connected data). They compute in the dtype of their inputs; the
detection pipeline feeds float32 throughout.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """An operand's shape violates the kernel's contract."""


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


@dataclass
class LayerGrads:
    """Gradients produced by a layer's backward pass.

    `d_weights`/`d_bias` are None for parameter-free layers; for PReLU the
    slope gradients travel in `d_weights`.
    """

    d_input: np.ndarray
    d_weights: Optional[np.ndarray] = None
    d_bias: Optional[np.ndarray] = None


def _conv_check(x, weights, bias, stride):
    _require(x.ndim == 4, f"conv2d input must be 4-d NCHW, got rank {x.ndim}")
    _require(weights.ndim == 4, f"conv2d weights must be 4-d, got rank {weights.ndim}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weights.shape
    _require(ic == c, f"conv2d channel mismatch: input has {c} channels, weights expect {ic}")
    _require(kh <= h and kw <= w,
             f"conv2d kernel {kh}x{kw} larger than input {h}x{w}")
    _require(bias.shape == (oc,), f"conv2d bias must have shape ({oc},), got {bias.shape}")
    _require(stride >= 1, "conv2d stride must be positive")


def _im2col(x, kh, kw, stride):
    """Patch matrix (n*oh*ow, c*kh*kw) of all kernel windows, plus (oh, ow)."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return win.reshape(n * oh * ow, c * kh * kw), oh, ow


def conv2d(x, weights, bias, stride=1):
    """Valid cross-correlation of an NCHW input with [out_c, in_c, kh, kw]
    weights plus per-channel bias.

    Output shape is [N, out_c, (H-kh)//stride + 1, (W-kw)//stride + 1].
    """
    out, _ = conv2d_with_cols(x, weights, bias, stride)
    return out


def conv2d_with_cols(x, weights, bias, stride=1):
    """conv2d that also returns its patch matrix so backward can reuse it."""
    _conv_check(x, weights, bias, stride)
    n = x.shape[0]
    oc, _, kh, kw = weights.shape
    cols, oh, ow = _im2col(x, kh, kw, stride)
    out = cols @ weights.reshape(oc, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))
    return out, cols


def conv2d_backward_cols(input_shape, cols, weights, stride, d_out):
    """Gradients of conv2d from the cached patch matrix."""
    n, c, h, w = input_shape
    oc, ic, kh, kw = weights.shape
    _require(d_out.shape[:2] == (n, oc), "conv2d_backward: d_out batch/channel mismatch")
    oh, ow = d_out.shape[2:]

    d_out_mat = d_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
    d_w = (d_out_mat.T @ cols).reshape(weights.shape)
    d_b = d_out_mat.sum(axis=0)

    # fold the patch-matrix gradient back onto input positions (col2im);
    # accumulate in NHWC so the writes stay contiguous, transpose once
    d_cols = d_out_mat @ weights.reshape(oc, -1)
    d_cols = d_cols.reshape(n, oh, ow, c, kh, kw)
    d_x = np.zeros((n, h, w, c), dtype=d_out.dtype)
    for a in range(kh):
        for b in range(kw):
            d_x[:, a:a + oh * stride:stride, b:b + ow * stride:stride, :] += (
                d_cols[:, :, :, :, a, b])
    return LayerGrads(d_input=np.ascontiguousarray(d_x.transpose(0, 3, 1, 2)),
                      d_weights=d_w, d_bias=d_b)


def conv2d_backward(x, weights, stride, d_out):
    """Gradients of conv2d w.r.t. input, weights, and bias."""
    oc, ic, kh, kw = weights.shape
    cols, _, _ = _im2col(x, kh, kw, stride)
    return conv2d_backward_cols(x.shape, cols, weights, stride, d_out)


def pool_output_extent(size, k, stride, ceil_mode):
    """Output extent of a pooling axis; ceil-mode never starts a window past
    the input edge."""
    if ceil_mode:
        e = -(-(size - k) // stride) + 1
        if (e - 1) * stride >= size:
            e -= 1
    else:
        e = (size - k) // stride + 1
    return e


def max_pool(x, k, stride, ceil_mode=True):
    """Max pooling with k x k windows; ceil-mode windows that extend past the
    edge are truncated at the edge.

    Returns (output, argmax) where argmax holds, per output element, the flat
    spatial index (y * W + x) of the winning input element, for backward.
    """
    _require(x.ndim == 4, f"max_pool input must be 4-d NCHW, got rank {x.ndim}")
    n, c, h, w = x.shape
    _require(k <= h and k <= w, f"max_pool window {k} exceeds input {h}x{w}")
    _require(stride >= 1, "max_pool stride must be positive")

    oh = pool_output_extent(h, k, stride, ceil_mode)
    ow = pool_output_extent(w, k, stride, ceil_mode)
    ph = (oh - 1) * stride + k
    pw = (ow - 1) * stride + k
    if ph > h or pw > w:
        padded = np.full((n, c, ph, pw), -np.inf, dtype=x.dtype)
        padded[:, :, :h, :w] = x
    else:
        padded = x

    # walk the k*k taps over strided views; ties keep the first (row-major)
    # tap, matching a flat window argmax
    out = None
    loc = None
    for t in range(k * k):
        a, b = divmod(t, k)
        v = padded[:, :, a:a + (oh - 1) * stride + 1:stride,
                   b:b + (ow - 1) * stride + 1:stride]
        if out is None:
            out = v.copy()
            loc = np.zeros((n, c, oh, ow), dtype=np.int64)
        else:
            better = v > out
            np.copyto(out, v, where=better)
            np.copyto(loc, t, where=better)
    rows = (np.arange(oh) * stride)[None, None, :, None]
    cols = (np.arange(ow) * stride)[None, None, None, :]
    gy = rows + loc // k
    gx = cols + loc % k
    argmax = gy * w + gx
    return out, argmax


def max_pool_backward(input_shape, argmax, d_out):
    """Route pooled gradients back to the recorded argmax positions."""
    n, c, h, w = input_shape
    _require(argmax.shape == d_out.shape, "max_pool_backward: argmax/d_out shapes differ")
    d_x = np.zeros((n, c, h * w), dtype=d_out.dtype)
    ii = np.arange(n)[:, None, None, None]
    jj = np.arange(c)[None, :, None, None]
    np.add.at(d_x, (ii, jj, argmax), d_out)
    return LayerGrads(d_input=d_x.reshape(n, c, h, w))


def _slope_shape(x, slopes):
    _require(x.ndim >= 2, "prelu input must have a channel axis")
    _require(slopes.shape == (x.shape[1],),
             f"prelu expects {x.shape[1]} slopes, got {slopes.shape}")
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def prelu(x, slopes):
    """Per-channel parametric ReLU: x if x >= 0 else slope_c * x."""
    s = slopes.reshape(_slope_shape(x, slopes))
    return np.where(x >= 0, x, x * s)


def prelu_backward(x, slopes, d_out):
    """Gradients of prelu w.r.t. input and slopes (slopes arrive in d_weights)."""
    s = slopes.reshape(_slope_shape(x, slopes))
    neg = x < 0
    d_x = d_out * np.where(neg, s, np.asarray(1, dtype=x.dtype))
    axes = (0,) + tuple(range(2, x.ndim))
    d_slopes = (d_out * np.where(neg, x, np.asarray(0, dtype=x.dtype))).sum(axis=axes)
    return LayerGrads(d_input=d_x, d_weights=d_slopes)


def fully_connected(x, weights, bias):
    """Affine map of row vectors: out = x @ weights.T + bias."""
    _require(x.ndim == 2, f"fully_connected input must be 2-d, got rank {x.ndim}")
    d_out, d_in = weights.shape
    _require(x.shape[1] == d_in,
             f"fully_connected expects {d_in} input features, got {x.shape[1]}")
    _require(bias.shape == (d_out,),
             f"fully_connected bias must have shape ({d_out},), got {bias.shape}")
    return x @ weights.T + bias


def fully_connected_backward(x, weights, d_out):
    """Gradients of fully_connected w.r.t. input, weights, and bias."""
    d_x = d_out @ weights
    d_w = d_out.T @ x
    d_b = d_out.sum(axis=0)
    return LayerGrads(d_input=d_x, d_weights=d_w, d_bias=d_b)


def softmax_channels(x):
    """Softmax over the channel axis (axis 1), max-shifted for stability."""
    _require(x.ndim >= 2, "softmax_channels input must have a channel axis")
    _require(x.shape[1] >= 2, "softmax_channels needs at least 2 channels")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)
