"""Numerical kernels on dense float64 arrays.

Tensors are plain ``numpy.ndarray`` objects in row-major order. Feature maps
use the ``N x C x H x W`` layout. Every forward kernel here has a matching
``*_backward`` kernel that maps an output cotangent to input (and parameter)
cotangents; :mod:`fullgrad.grads` chains them over a network trace.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError

__all__ = [
    "as_tensor",
    "conv2d",
    "conv2d_backward",
    "conv_output_size",
    "linear",
    "linear_backward",
    "relu",
    "relu_backward",
    "batchnorm2d_eval",
    "batchnorm_implicit_bias",
    "maxpool2d",
    "maxpool2d_backward",
    "avgpool2d",
    "avgpool2d_backward",
    "bilinear_upsample",
    "rescale_unit",
    "log_softmax",
]


def as_tensor(value):
    """Return ``value`` as a C-contiguous float64 array."""
    return np.ascontiguousarray(value, dtype=np.float64)


def _pair(v):
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_output_size(size, kernel, stride, padding):
    """Output extent of a sliding window along one axis."""
    out = (size + 2 * padding - kernel) // stride + 1
    if size + 2 * padding < kernel or out < 1:
        raise DimensionError(
            f"kernel {kernel} does not fit input extent {size} with padding {padding}"
        )
    return out


def _windows(x, kh, kw, stride, padding):
    """Strided view of shape (N, C, H', W', kh, kw) over the padded input."""
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, :: stride[0], :: stride[1]]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation (no kernel flip) with per-channel bias.

    Parameters
    ----------
    x : ndarray, shape (N, Cin, H, W)
    weight : ndarray, shape (Cout, Cin, kh, kw)
    bias : ndarray of shape (Cout,) or None
    stride, padding : int or pair of ints

    Returns
    -------
    ndarray, shape (N, Cout, H', W') with ``H' = (H + 2p - kh) // s + 1``.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and 4-D weight")
    stride, padding = _pair(stride), _pair(padding)
    if stride[0] < 1 or stride[1] < 1 or padding[0] < 0 or padding[1] < 0:
        raise DimensionError(f"invalid stride {stride} or padding {padding}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"input has {cin} channels but weight expects {wcin}")
    conv_output_size(h, kh, stride[0], padding[0])
    conv_output_size(w, kw, stride[1], padding[1])

    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',Cout
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out, x, weight, stride=1, padding=0, need_input=True):
    """Cotangents of :func:`conv2d` with respect to input, weight and bias."""
    x = as_tensor(x)
    stride, padding = _pair(stride), _pair(padding)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    _, _, oh, ow = grad_out.shape

    win = _windows(x, kh, kw, stride, padding)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input:
        return None, grad_w, grad_b

    cols = np.tensordot(grad_out, weight, axes=([1], [0]))  # N,H',W',Cin,kh,kw
    ph, pw = padding
    gx = np.zeros((n, cin, h + 2 * ph, w + 2 * pw))
    sh, sw = stride
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    gx = gx[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(gx), grad_w, grad_b


def linear(x, weight, bias=None):
    """Affine map ``out[n, k] = sum_d weight[k, d] * x[n, d] + bias[k]``."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError("linear expects 2-D input and 2-D weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} features but weight expects {weight.shape[1]}"
        )
    out = x @ weight.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def linear_backward(grad_out, x, weight):
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(grad_out, x):
    # derivative at exactly 0 is taken as 0
    return np.where(x > 0, grad_out, 0.0)


def _bn_scale(gamma, running_var, eps):
    denom = np.asarray(running_var, dtype=np.float64) + eps
    if np.any(denom <= 0):
        raise DomainError("batch-norm running_var + eps must be positive")
    return as_tensor(gamma) / np.sqrt(denom)


def batchnorm_implicit_bias(gamma, beta, running_mean, running_var, eps):
    """Additive term ``beta - gamma * mean / sqrt(var + eps)`` of eval-mode batch norm.

    Eval-mode batch norm is the per-channel affine map ``scale * x + bias``;
    this returns ``bias``.
    """
    scale = _bn_scale(gamma, running_var, eps)
    return as_tensor(beta) - scale * as_tensor(running_mean)


def batchnorm2d_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Batch norm with frozen statistics, applied per channel of an NCHW tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("batchnorm2d expects a 4-D input")
    c = x.shape[1]
    for name, arr in (
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ):
        if np.shape(arr) != (c,):
            raise DimensionError(f"{name} shape {np.shape(arr)} != ({c},)")
    scale = _bn_scale(gamma, running_var, eps)
    shift = batchnorm_implicit_bias(gamma, beta, running_mean, running_var, eps)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def _check_window(x, window, stride):
    if x.ndim != 4:
        raise DimensionError("pooling expects a 4-D input")
    kh, kw = _pair(window)
    sh, sw = _pair(stride)
    if kh > x.shape[2] or kw > x.shape[3]:
        raise DimensionError(f"pool window {(kh, kw)} larger than input {x.shape[2:]}")
    if min(kh, kw, sh, sw) < 1:
        raise DimensionError("pool window and stride must be positive")
    return (kh, kw), (sh, sw)


def maxpool2d(x, window=2, stride=None):
    """Max pooling without padding.

    Returns the pooled tensor and, for each output element, the flat spatial
    index ``h * W + w`` of the input element that won. Ties go to the lowest
    flat index.
    """
    x = as_tensor(x)
    stride = window if stride is None else stride
    (kh, kw), (sh, sw) = _check_window(x, window, stride)
    n, c, h, w = x.shape
    win = _windows(x, kh, kw, (sh, sw), (0, 0))
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    local = np.argmax(flat, axis=-1)  # first occurrence wins
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    li, lj = np.divmod(local, kw)
    rows = np.arange(oh)[:, None] * sh + li
    cols = np.arange(ow)[None, :] * sw + lj
    argmax = rows * w + cols
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward(grad_out, argmax, input_shape):
    n, c, h, w = input_shape
    gx = np.zeros((n * c, h * w))
    idx = argmax.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), idx.shape[1])
    np.add.at(gx, (rows, idx.ravel()), grad_out.reshape(n * c, -1).ravel())
    return gx.reshape(input_shape)


def avgpool2d(x, window=2, stride=None):
    x = as_tensor(x)
    stride = window if stride is None else stride
    (kh, kw), (sh, sw) = _check_window(x, window, stride)
    win = _windows(x, kh, kw, (sh, sw), (0, 0))
    return np.ascontiguousarray(win.mean(axis=(4, 5)))


def avgpool2d_backward(grad_out, input_shape, window=2, stride=None):
    stride = window if stride is None else stride
    kh, kw = _pair(window)
    sh, sw = _pair(stride)
    _, _, oh, ow = grad_out.shape
    gx = np.zeros(input_shape)
    share = grad_out / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += share
    return gx


def _interp_matrix(src, dst):
    """Dense (dst, src) matrix of half-pixel-centre linear interpolation weights."""
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x, size):
    """Upsample the trailing two axes of ``x`` to ``size = (H, W)``.

    Output pixel ``o`` samples source coordinate ``(o + 0.5) * h / H - 0.5``,
    clamped to ``[0, h - 1]``, and interpolates linearly between its two
    neighbours along each axis. Any leading axes are carried through.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("bilinear_upsample needs at least two axes")
    big_h, big_w = _pair(size)
    h, w = x.shape[-2:]
    if big_h < h or big_w < w:
        raise DimensionError(f"cannot downsample {(h, w)} to {(big_h, big_w)}")
    if (big_h, big_w) == (h, w):
        return x.copy()
    rh = _interp_matrix(h, big_h)
    rw = _interp_matrix(w, big_w)
    return np.ascontiguousarray(rh @ x @ rw.T)


def rescale_unit(x, eps=1e-12):
    """Affinely map values onto [0, 1] using the global min and max.

    A constant input maps to all zeros.
    """
    x = as_tensor(x)
    if x.size == 0:
        return x.copy()
    lo = x.min()
    return (x - lo) / (x.max() - lo + eps)


def log_softmax(x):
    x = as_tensor(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
