"""Differentiable operations.

Every op takes Tensors (or array-likes, treated as constants), computes its
forward result with numpy and, when a tape is active and some input needs a
gradient, records a closure that maps the output gradient to input
gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, active_tape, as_tensor


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the axis."""


def _out(data, inputs, backward, op):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, backward, op)
    return out


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _out(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _out(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _out(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _out(a.data / b.data, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _out(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = as_tensor(a)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _out(a.data ** p, (a,), backward, "power")


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _out(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    a = as_tensor(a)
    return _out(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _out(y, (a,), lambda g: (g / (2.0 * y),), "sqrt")


def abs(a):
    a = as_tensor(a)
    return _out(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _out(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _out(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a):
    a = as_tensor(a)
    # split on sign so neither branch overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _out(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _out(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(a):
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _out((x * cdf).astype(x.dtype), (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype),), "gelu")


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _out(np.asarray(y), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    y = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(y).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=True),)

    return _out(np.asarray(y), (a,), backward, "mean")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner axis mismatch: {a.shape[-1]} vs {b.shape[-2]}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _out(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as (in_features, out_features)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    a = as_tensor(a)
    return _out(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _out(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _out(np.ascontiguousarray(a.data[index]), (a,), backward, "getitem")


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        for ax, (n0, n1) in enumerate(zip(tensors[0].shape, t.shape)):
            if ax != axis % t.ndim and n0 != n1:
                raise ShapeError(f"concat: axis {ax} differs ({n0} vs {n1})")
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return out

    return _out(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def pad(a, widths):
    """Zero-pad; ``widths`` is a sequence of (before, after) per axis."""
    a = as_tensor(a)
    widths = tuple(tuple(w) for w in widths)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _out(np.pad(a.data, widths), (a,), lambda g: (np.ascontiguousarray(g[index]),), "pad")


def embedding(ids, table):
    """Row lookup ``table[ids]``; ids is an integer array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _out(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------- normalisation / attention helpers

def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get zero weight."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _out(y, (a,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _out(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def mae_loss(pred, target):
    """Mean absolute error over all elements; subgradient 0 where equal."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s.astype(pred.dtype), (-s).astype(target.dtype)

    return _out(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred, target), backward, "mae_loss")


# ---------------------------------------------------------------- convolution family

def _check4(x, name):
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D [N, C, H, W] tensor, got shape {x.shape}")


def _flat_padded(x, pads, kw):
    """Write x into a zero buffer laid out row-major over the padded grid.

    A 2-D shift (i, j) of the padded image is then the contiguous slice
    starting at ``i * Wp + j``; the extra ``kw - 1`` tail elements keep the
    last shifted slice in bounds.
    """
    n, c, h, w = x.shape
    pt, pb, pl, pr = pads
    hp, wp = h + pt + pb, w + pl + pr
    flat = np.zeros((n, c, hp * wp + kw - 1), dtype=x.dtype)
    flat[..., : hp * wp].reshape(n, c, hp, wp)[:, :, pt : pt + h, pl : pl + w] = x
    return flat, hp, wp


def _conv_forward(x, w, pads):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    flat, hp, wp = _flat_padded(x, pads, kw)
    ho, wo = hp - kh + 1, wp - kw + 1
    span = ho * wp
    # one GEMM for all taps, then shift-and-add the per-tap partial outputs
    w_taps = w.transpose(2, 3, 0, 1).reshape(kh * kw * co, c)
    partial = np.matmul(w_taps, flat).reshape(n, kh * kw, co, -1)
    out = np.zeros((n, co, span), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            out += partial[:, i * kw + j, :, off : off + span]
    return np.ascontiguousarray(out.reshape(n, co, ho, wp)[..., :wo]), (flat, hp, wp, ho, wo)


def _conv_backward(g, x, w, pads, geom):
    flat, hp, wp, ho, wo = geom
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    span = ho * wp
    gwide = np.zeros((n, co, ho, wp), dtype=g.dtype)
    gwide[..., :wo] = g
    gwide = gwide.reshape(n, co, span)
    gw = np.empty_like(w)
    gflat = np.zeros((n, c, flat.shape[-1]), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            window = flat[:, :, off : off + span]
            gw[:, :, i, j] = np.matmul(gwide, window.transpose(0, 2, 1)).sum(axis=0)
    # input gradient: per-tap partials of W^T g, scattered back by the same shifts
    w_taps_t = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, co)
    partial = np.matmul(w_taps_t, gwide).reshape(n, kh * kw, c, span)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            gflat[:, :, off : off + span] += partial[:, i * kw + j]
    pt, pb, pl, pr = pads
    gx = gflat[..., : hp * wp].reshape(n, c, hp, wp)[:, :, pt : pt + h, pl : pl + wd]
    return np.ascontiguousarray(gx), gw


def _norm_pads(padding):
    if isinstance(padding, int):
        return (padding,) * 4
    pads = tuple(int(p) for p in padding)
    if len(pads) == 2:
        return (pads[0], pads[0], pads[1], pads[1])
    if len(pads) != 4:
        raise ValueError("padding must be an int, (ph, pw) or (top, bottom, left, right)")
    return pads


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation.

    ``padding`` is an int or explicit (top, bottom, left, right) so even
    kernels can keep the spatial size at stride 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "conv2d input")
    _check4(weight, "conv2d kernel")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: channel axis (1) mismatch, input has {x.shape[1]} but kernel expects {weight.shape[1]}")
    pads = _norm_pads(padding)
    kh, kw = weight.shape[2:]
    if x.shape[2] + pads[0] + pads[1] < kh:
        raise ShapeError(f"conv2d: height axis (2) of size {x.shape[2]} is smaller than the kernel")
    if x.shape[3] + pads[2] + pads[3] < kw:
        raise ShapeError(f"conv2d: width axis (3) of size {x.shape[3]} is smaller than the kernel")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d: bias axis 0 has {bias.shape} but kernel has {weight.shape[0]} output channels")
    y, geom = _conv_forward(x.data, weight.data, pads)
    full_shape = y.shape
    if stride != 1:
        y = np.ascontiguousarray(y[:, :, ::stride, ::stride])
    if bias is not None:
        y += bias.data[None, :, None, None]

    def backward(g):
        if stride != 1:
            gfull = np.zeros(full_shape, dtype=g.dtype)
            gfull[:, :, ::stride, ::stride] = g
            g = gfull
        gx, gw = _conv_backward(g, x.data, weight.data, pads, geom)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _out(y, inputs, backward, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=2):
    """Transposed convolution with kernel (C_in, C_out, k, k), k >= stride.

    The full output ``(H - 1) * stride + k`` is cropped symmetrically to
    exactly ``stride * H``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "conv_transpose2d input")
    _check4(weight, "conv_transpose2d kernel")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"conv_transpose2d: channel axis (1) mismatch, input has {x.shape[1]} but kernel expects {weight.shape[0]}")
    n, c, h, w = x.shape
    _, co, kh, kw = weight.shape
    if kh < stride or kw < stride:
        raise ShapeError("conv_transpose2d: kernel must be at least as large as the stride")
    crop_h, crop_w = (kh - stride) // 2, (kw - stride) // 2
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    # cols[n, o, i, j, y, x] = sum_c x[n, c, y, x] * W[c, o, i, j]
    w2 = weight.data.reshape(c, co * kh * kw)
    cols = np.matmul(w2.T, x.data.reshape(n, c, h * w)).reshape(n, co, kh, kw, h, w)
    full = np.zeros((n, co, hf, wf), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += cols[:, :, i, j]
    y = np.ascontiguousarray(full[:, :, crop_h : crop_h + stride * h, crop_w : crop_w + stride * w])
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros((n, co, hf, wf), dtype=g.dtype)
        gfull[:, :, crop_h : crop_h + stride * h, crop_w : crop_w + stride * w] = g
        gcols = np.empty((n, co, kh, kw, h, w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j] = gfull[:, :, i : i + stride * h : stride, j : j + stride * w : stride]
        gcols = gcols.reshape(n, co * kh * kw, h * w)
        gx = np.matmul(w2, gcols).reshape(n, c, h, w)
        gw = np.matmul(x.data.reshape(n, c, h * w), gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _out(y, inputs, backward, "conv_transpose2d")


def avg_pool2d(x, window=2):
    x = as_tensor(x)
    _check4(x, "avg_pool2d input")
    n, c, h, w = x.shape
    if h % window:
        raise ShapeError(f"avg_pool2d: height axis (2) of size {h} is not divisible by {window}")
    if w % window:
        raise ShapeError(f"avg_pool2d: width axis (3) of size {w} is not divisible by {window}")
    y = x.data.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))
    area = window * window

    def backward(g):
        gx = np.broadcast_to((g / area)[:, :, :, None, :, None], (n, c, h // window, window, w // window, window))
        return (gx.reshape(n, c, h, w).astype(x.dtype),)

    return _out(y, (x,), backward, "avg_pool2d")


class DegenerateBatchError(ValueError):
    pass


def batch_norm2d(x, gamma, beta, running_mean=None, running_var=None, training=True, momentum=0.1, eps=1e-5):
    """Per-channel batch normalisation of an [N, C, H, W] tensor.

    In training mode the batch statistics are used and the running buffers
    (plain numpy arrays) are updated in place with unbiased variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check4(x, "batch_norm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: channel axis (1) has {c} channels but gamma/beta have {gamma.shape}/{beta.shape}")
    count = n * h * w
    if training:
        if count < 2:
            raise DegenerateBatchError("batch_norm2d in training mode needs N*H*W >= 2 per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * (count / (count - 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm2d in eval mode needs running statistics")
        mu = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
        xc = x.data - mu[None, :, None, None]
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv)[None, :, None, None]
            if training:
                gx = scale * (g - (gbeta / count)[None, :, None, None] - xhat * (ggamma / count)[None, :, None, None])
            else:
                gx = g * scale
        return gx, ggamma, gbeta

    return _out(y, (x, gamma, beta), backward, "batch_norm2d")
