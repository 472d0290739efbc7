"""Differentiable primitive ops on NCHW :class:`~bisenet.tensor.Tensor` values.

Every op accepts meta tensors: it then only computes the output shape and
emits a trace record, so the same code path serves shape checking, cost
accounting and numeric execution.

Convolution and interpolation kernels widen float32 inputs to float64 for
accumulation and round the result back to the input dtype.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, StateError
from .tensor import Tensor, make_output, record

__all__ = [
    "conv2d", "batchnorm2d", "relu", "sigmoid", "maxpool2d", "avgpool2d",
    "global_avgpool", "upsample_bilinear", "resize_bilinear", "concat_channels",
    "add", "mul", "scale", "sum_all", "weighted_sum", "conv_output_hw",
]


def _check4(x, what="input"):
    if len(x.shape) != 4:
        raise ConfigError(f"{what} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ConfigError(f"{what} has an empty dimension: {x.shape}")


def _numeric(*tensors):
    """True when the op must compute values; raises on half-initialized inputs."""
    meta = [t for t in tensors if t is not None and t.is_meta]
    if not meta:
        return True
    if meta[0] is tensors[0]:
        return False
    name = getattr(meta[0], "name", "") or "<unnamed>"
    raise StateError(f"parameter {name!r} is uninitialized")


def _wide(a):
    return a.astype(np.float64) if a.dtype == np.float32 else a


def conv_output_hw(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _window_out(h, w, k, stride, pad, op):
    if stride < 1 or pad < 0:
        raise ConfigError(f"{op}: stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ConfigError(f"{op}: window {k}x{k} larger than padded input "
                          f"{h + 2 * pad}x{w + 2 * pad}")
    return conv_output_hw(h, w, k, stride, pad)


def _windows(xp, k, stride, ho, wo):
    # (n, c, ho, wo, k, k) view
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride][:, :, :ho, :wo]


# --- convolution ----------------------------------------------------------

def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    """2-D cross-correlation with optional bias and channel groups.

    ``w`` has shape (c_out, c_in // groups, k, k); ``groups == c_in`` gives a
    depthwise convolution.
    """
    _check4(x)
    if len(w.shape) != 4 or w.shape[2] != w.shape[3]:
        raise ConfigError(f"kernel must be (c_out, c_in/groups, k, k), got {w.shape}")
    n, c, h, wd = x.shape
    co, cpg, k, _ = w.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"groups={groups} does not divide c_in={c}")
    if co % groups:
        raise ConfigError(f"groups={groups} does not divide c_out={co}")
    if cpg != c // groups:
        raise ConfigError(f"kernel expects c_in/groups={cpg} but input has "
                          f"c_in={c} with groups={groups}")
    if b is not None and tuple(b.shape) != (co,):
        raise ConfigError(f"bias shape {b.shape} != ({co},)")
    ho, wo = _window_out(h, wd, k, stride, pad, "conv2d")
    out_shape = (n, co, ho, wo)
    nparams = w.size + (b.size if b is not None else 0)
    record("conv2d", [x], out_shape, macs=k * k * cpg * co * ho * wo * n,
           elementwise=(n * co * ho * wo if b is not None else 0), params=nparams,
           k=k, stride=stride, pad=pad, groups=groups, c_in=c, c_out=co)
    if not _numeric(x, w, b):
        return Tensor.meta(out_shape)

    dtype = x.data.dtype
    xp = np.pad(_wide(x.data), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride, ho, wo)
    ww = _wide(w.data)
    g, opg = groups, co // groups
    if g == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        wmat = ww.reshape(co, c * k * k)
        out = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    else:
        cols = (win.reshape(n, g, cpg, ho, wo, k, k)
                .transpose(0, 3, 4, 1, 2, 5, 6).reshape(n * ho * wo, g, cpg * k * k))
        wmat = ww.reshape(g, opg, cpg * k * k)
        out = np.einsum("pgk,gok->pgo", cols, wmat, optimize=True)
        out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + _wide(b.data)[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=dtype)

    def backward_fn(gout):
        gw = _wide(gout).transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        if g == 1:
            dw = (gw.T @ cols).reshape(co, c, k, k)
            dcols = (gw @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        else:
            gw3 = gw.reshape(n * ho * wo, g, opg)
            dw = np.einsum("pgo,pgk->gok", gw3, cols, optimize=True).reshape(co, cpg, k, k)
            dcols = np.einsum("pgo,gok->pgk", gw3, wmat, optimize=True)
            dcols = (dcols.reshape(n, ho, wo, g, cpg, k, k)
                     .transpose(0, 3, 4, 1, 2, 5, 6).reshape(n, c, ho, wo, k, k))
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        db = None if b is None else gw.sum(axis=0).astype(dtype)
        return dx.astype(dtype), dw.astype(dtype), db

    return make_output(out, (x, w, b), backward_fn, "conv2d")


# --- normalization --------------------------------------------------------

def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    buffers (plain numpy arrays) are updated in place with
    ``r <- (1 - momentum) * r + momentum * s``; the running variance uses the
    unbiased batch variance.  Eval mode normalizes with the running buffers.
    """
    _check4(x)
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta)):
        if tuple(t.shape) != (c,):
            raise ConfigError(f"batchnorm {name} shape {t.shape} != ({c},)")
    record("batchnorm2d", [x], x.shape, elementwise=x.size,
           params=gamma.size + beta.size)
    if not _numeric(x, gamma, beta):
        return Tensor.meta(x.shape)
    if not training and (running_mean is None or running_var is None):
        raise StateError("batchnorm in eval mode with uninitialized running statistics")
    for name, r in (("running_mean", running_mean), ("running_var", running_var)):
        if r is not None and r.shape != (c,):
            raise ConfigError(f"batchnorm {name} length {r.shape} != ({c},)")

    dtype = x.data.dtype
    xd = x.data
    g = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = xd.var(axis=(0, 2, 3), dtype=np.float64)
        if running_mean is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            running_mean *= (1 - momentum)
            running_mean += momentum * mean
            running_var *= (1 - momentum)
            running_var += momentum * unbiased
    else:
        m = None
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)).astype(dtype)
    out = (xhat * g + beta.data.reshape(1, c, 1, 1)).astype(dtype)

    def backward_fn(gout):
        dgamma = (gout * xhat).sum(axis=(0, 2, 3)).astype(dtype)
        dbeta = gout.sum(axis=(0, 2, 3)).astype(dtype)
        gx = gout * g
        if training:
            s1 = gx.mean(axis=(0, 2, 3), keepdims=True)
            s2 = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = (gx - s1 - xhat * s2) * inv.reshape(1, c, 1, 1)
        else:
            dx = gx * inv.reshape(1, c, 1, 1)
        return dx.astype(dtype), dgamma, dbeta

    return make_output(out, (x, gamma, beta), backward_fn, "batchnorm2d")


# --- activations ----------------------------------------------------------

def relu(x):
    record("relu", [x], x.shape, elementwise=x.size)
    if x.is_meta:
        return Tensor.meta(x.shape)
    mask = x.data > 0
    out = np.maximum(x.data, 0).astype(x.data.dtype)  # keeps NaN visible
    return make_output(out, (x,), lambda g: (g * mask,), "relu")


def _logistic(a):
    z = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x):
    record("sigmoid", [x], x.shape, elementwise=x.size)
    if x.is_meta:
        return Tensor.meta(x.shape)
    s = _logistic(x.data).astype(x.data.dtype)
    return make_output(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


# --- pooling --------------------------------------------------------------

def maxpool2d(x, k, stride, pad=0):
    _check4(x)
    n, c, h, w = x.shape
    ho, wo = _window_out(h, w, k, stride, pad, "maxpool2d")
    out_shape = (n, c, ho, wo)
    record("maxpool2d", [x], out_shape, elementwise=n * c * ho * wo * k * k, k=k,
           stride=stride, pad=pad)
    if x.is_meta:
        return Tensor.meta(out_shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = _windows(xp, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0].astype(x.data.dtype)

    def backward_fn(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(idx == t, g, 0)
        return (dxp[:, :, pad:pad + h, pad:pad + w],)

    return make_output(out, (x,), backward_fn, "maxpool2d")


def avgpool2d(x, k, stride, pad=0):
    """Windowed mean; padded cells are excluded from the divisor."""
    _check4(x)
    n, c, h, w = x.shape
    ho, wo = _window_out(h, w, k, stride, pad, "avgpool2d")
    out_shape = (n, c, ho, wo)
    record("avgpool2d", [x], out_shape, elementwise=n * c * ho * wo * k * k, k=k,
           stride=stride, pad=pad)
    if x.is_meta:
        return Tensor.meta(out_shape)
    dtype = x.data.dtype
    ones = np.pad(np.ones((h, w)), pad)
    count = sliding_window_view(ones, (k, k))[::stride, ::stride][:ho, :wo].sum(axis=(-1, -2))
    xp = np.pad(_wide(x.data), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = (_windows(xp, k, stride, ho, wo).sum(axis=(-1, -2)) / count).astype(dtype)

    def backward_fn(g):
        gc = _wide(g) / count
        dxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc
        return (dxp[:, :, pad:pad + h, pad:pad + w].astype(dtype),)

    return make_output(out, (x,), backward_fn, "avgpool2d")


def global_avgpool(x):
    _check4(x)
    n, c, h, w = x.shape
    record("global_avgpool", [x], (n, c, 1, 1), elementwise=x.size)
    if x.is_meta:
        return Tensor.meta((n, c, 1, 1))
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.data.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(g.dtype),)

    return make_output(out, (x,), backward_fn, "global_avgpool")


# --- interpolation --------------------------------------------------------

def interp_matrix(n_in, n_out):
    """Half-pixel bilinear weights mapping ``n_in`` samples to ``n_out``.

    Output index ``j`` samples source coordinate ``(j + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]``.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x, size):
    """Bilinear resize of the spatial dims to ``size = (h_out, w_out)``."""
    _check4(x)
    n, c, h, w = x.shape
    ho, wo = int(size[0]), int(size[1])
    if ho < 1 or wo < 1:
        raise ConfigError(f"resize target must be positive, got {size}")
    out_shape = (n, c, ho, wo)
    record("upsample_bilinear", [x], out_shape, elementwise=n * c * ho * wo)
    if x.is_meta:
        return Tensor.meta(out_shape)
    dtype = x.data.dtype
    ah, aw = interp_matrix(h, ho), interp_matrix(w, wo)
    out = (ah @ _wide(x.data) @ aw.T).astype(dtype)

    def backward_fn(g):
        return ((ah.T @ _wide(g) @ aw).astype(dtype),)

    return make_output(out, (x,), backward_fn, "upsample_bilinear")


def upsample_bilinear(x, scale):
    if int(scale) != scale or scale < 1:
        raise ConfigError(f"upsample scale must be a positive integer, got {scale}")
    _check4(x)
    return resize_bilinear(x, (x.shape[2] * scale, x.shape[3] * scale))


# --- structural and elementwise ------------------------------------------

def concat_channels(xs):
    if not xs:
        raise ConfigError("concat of an empty list")
    for t in xs:
        _check4(t)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ConfigError(f"concat needs equal n,h,w: {xs[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out_shape = (n, int(sum(t.shape[1] for t in xs)), h, w)
    record("concat", list(xs), out_shape)
    if any(t.is_meta for t in xs):
        return Tensor.meta(out_shape)
    out = np.concatenate([t.data for t in xs], axis=1)
    return make_output(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)),
                       "concat")


def _broadcast_shape(a, b, op):
    if a.shape == b.shape:
        return a.shape
    for big, small in ((a, b), (b, a)):
        if (len(big.shape) == len(small.shape) == 4
                and small.shape[:2] == big.shape[:2] and small.shape[2:] == (1, 1)):
            return big.shape
    raise ConfigError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    return g.sum(axis=(2, 3), keepdims=True)


def add(x, y):
    """Elementwise sum; either operand may be (n, c, 1, 1) and broadcast over space."""
    shape = _broadcast_shape(x, y, "add")
    record("add", [x, y], shape, elementwise=int(np.prod(shape)))
    if x.is_meta or y.is_meta:
        return Tensor.meta(shape)
    out = x.data + y.data
    return make_output(out, (x, y),
                       lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)), "add")


def mul(x, y):
    """Elementwise product with the same broadcasting rule as :func:`add`."""
    shape = _broadcast_shape(x, y, "mul")
    record("mul", [x, y], shape, elementwise=int(np.prod(shape)))
    if x.is_meta or y.is_meta:
        return Tensor.meta(shape)
    xd, yd = x.data, y.data
    out = xd * yd
    return make_output(out, (x, y), lambda g: (_unbroadcast(g * yd, x.shape),
                                               _unbroadcast(g * xd, y.shape)), "mul")


def scale(x, s):
    """Multiply by a Python scalar."""
    record("scale", [x], x.shape, elementwise=x.size)
    if x.is_meta:
        return Tensor.meta(x.shape)
    return make_output((x.data * s).astype(x.data.dtype), (x,), lambda g: (g * s,), "scale")


def sum_all(x):
    if x.is_meta:
        return Tensor.meta((1,))
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype).reshape(1)
    return make_output(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape)
                                             .astype(x.data.dtype),), "sum")


def weighted_sum(x, weights):
    """``sum(x * weights)`` for a constant array ``weights``; used to scalarize outputs."""
    w = np.asarray(weights)
    out = np.asarray((x.data * w).sum(), dtype=x.data.dtype).reshape(1)
    return make_output(out, (x,), lambda g: ((g.reshape(()) * w).astype(x.data.dtype),),
                       "weighted_sum")


def add_scalars(terms):
    """Sum of shape-(1,) loss tensors."""
    out = np.asarray(sum(float(t.data[0]) for t in terms)).reshape(1)
    return make_output(out, tuple(terms), lambda g: tuple(g.copy() for _ in terms), "add")


def nearest_indices(n_in, n_out):
    """Source index for each of ``n_out`` nearest-neighbour samples (half-pixel centres)."""
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int)
    return np.clip(idx, 0, n_in - 1)


def resize_nearest(a, size):
    """Nearest-neighbour resize of the last two axes of an array (labels, masks)."""
    a = np.asarray(a)
    rows = nearest_indices(a.shape[-2], int(size[0]))
    cols = nearest_indices(a.shape[-1], int(size[1]))
    return a[..., rows[:, None], cols[None, :]]
