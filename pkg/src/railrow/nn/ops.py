"""Forward/backward pairs for the small layer set the row network needs.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ValidationError


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x, kernel, stride, pad):
    """Receptive fields as columns: ``(C*K*K, N*Ho*Wo)``, one strided copy per kernel tap."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, pad)
    wo = conv_output_size(w, kernel, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValidationError(f"input {h}x{w} too small for kernel {kernel}, pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kernel, kernel, n, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            win = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * kernel * kernel, n * ho * wo), ho, wo


def conv2d_forward(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``weight`` (C_out, C_in, K, K)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValidationError("conv2d expects 4-d input and weight")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ValidationError("only square kernels are supported")
    if x.shape[1] != c_in:
        raise ValidationError(f"input has {x.shape[1]} channels, weight expects {c_in}")
    n = x.shape[0]
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = weight.reshape(c_out, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    cache = (x.shape, cols, weight, stride, pad, ho, wo)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache):
    x_shape, cols, weight, stride, pad, ho, wo = cache
    n, c_in, h, w = x_shape
    c_out, _, k, _ = weight.shape
    d2 = dout.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dweight = (d2 @ cols.T).reshape(weight.shape)
    dbias = d2.sum(axis=1)
    dcols = (weight.reshape(c_out, -1).T @ d2).reshape(c_in, k, k, n, ho, wo)
    dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return dx, dweight, dbias


def linear_forward(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` laid out (d_in, d_out)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValidationError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        out += bias
    return out, (x, weight)


def linear_backward(dout, cache):
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_forward(x, axis=-1):
    y = softmax(x, axis)
    return y, (y, axis)


def softmax_backward(dout, cache):
    y, axis = cache
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dout, shape):
    return dout.reshape(shape)


def reshape_forward(x, shape):
    """Reshape the non-batch dimensions of ``x`` to ``shape``."""
    return x.reshape((x.shape[0],) + tuple(shape)), x.shape


reshape_backward = flatten_backward


def cross_entropy_loss(logits, targets, reduction="batch"):
    """Softmax cross-entropy over the last axis of ``logits``.

    ``reduction``: ``"sum"`` over all cells, ``"mean"`` over cells, or
    ``"batch"`` (sum over cells divided by the leading batch dimension).
    Returns ``(loss, dlogits)``.
    """
    targets = np.asarray(targets)
    k = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValidationError(f"targets shape {targets.shape} != logits {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValidationError(f"target class out of range [0, {k})")
    z = logits.astype(np.float64).reshape(-1, k)
    t = targets.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = lse - z[rows, t]
    if reduction == "sum":
        norm = 1.0
    elif reduction == "mean":
        norm = float(max(len(t), 1))
    elif reduction == "batch":
        norm = float(logits.shape[0])
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    grad = np.exp(z - lse[:, None])
    grad[rows, t] -= 1.0
    grad /= norm
    return float(nll.sum() / norm), grad.reshape(logits.shape).astype(logits.dtype)
