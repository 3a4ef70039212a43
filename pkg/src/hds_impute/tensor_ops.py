"""Small dense tensor primitives with hand-written backward rules.

Every function accepts an optional leading batch axis so a minibatch of
interaction tensors can be pushed through in one call. Shapes follow the
(batch, channels, d1, d2, d3) layout for 3D feature maps and
(out_channels, in_channels, k, k, k) for kernels. Everything is float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import sigmoid

EPS_STANDARDIZE = 1e-8


def outer3(a, b, c):
    """x[..., n, m, k] = a[..., n] * b[..., m] * c[..., k]."""
    a, b, c = (np.asarray(v, dtype=np.float64) for v in (a, b, c))
    if min(a.shape[-1], b.shape[-1], c.shape[-1]) < 1:
        raise ValueError("outer3 needs nonempty vectors")
    return a[..., :, None, None] * b[..., None, :, None] * c[..., None, None, :]


def outer3_backward(a, b, c, grad):
    ga = np.einsum("...nmk,...m,...k->...n", grad, b, c)
    gb = np.einsum("...nmk,...n,...k->...m", grad, a, c)
    gc = np.einsum("...nmk,...n,...m->...k", grad, a, b)
    return ga, gb, gc


def standardize(x, eps: float = EPS_STANDARDIZE):
    """Zero-mean, unit-(population)-std rescaling over the last three axes.

    Returns ``(x_std, mean, std)``; ``mean`` and ``std`` keep singleton axes so
    they broadcast against ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    axes = (-3, -2, -1)
    mu = x.mean(axis=axes, keepdims=True)
    centered = x - mu
    sd = np.sqrt((centered * centered).mean(axis=axes, keepdims=True))
    return centered / (sd + eps), mu, sd


def standardize_backward(x, mu, sd, grad, eps: float = EPS_STANDARDIZE):
    """Gradient through ``standardize`` including the dependence of mean and std on x."""
    axes = (-3, -2, -1)
    n = x.shape[-1] * x.shape[-2] * x.shape[-3]
    centered = x - mu
    denom = sd + eps
    g_centered = grad - grad.mean(axis=axes, keepdims=True)
    proj = (grad * centered).sum(axis=axes, keepdims=True)
    # d sd / d x_i = centered_i / (n sd); centered is identically 0 where sd == 0
    safe_sd = np.where(sd > 0, sd, 1.0)
    return g_centered / denom - centered * proj / (n * safe_sd * denom * denom)


def _check_conv_shapes(x, w, stride):
    if x.ndim != 5:
        raise ValueError(f"conv input must be (batch, channels, d1, d2, d3), got shape {x.shape}")
    if w.ndim != 5 or not w.shape[2] == w.shape[3] == w.shape[4]:
        raise ValueError(f"kernel must be (out, in, k, k, k), got shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel axis mismatch: kernel expects {w.shape[1]} input channels, input has {x.shape[1]}"
        )
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    k = w.shape[2]
    for axis in range(3):
        d = x.shape[2 + axis]
        if d < k:
            raise ValueError(f"spatial axis {axis}: extent {d} smaller than kernel size {k}")
        if (d - k) % stride:
            raise ValueError(f"spatial axis {axis}: (extent {d} - kernel {k}) not divisible by stride {stride}")


def conv_output_size(d: int, k: int, stride: int = 1) -> int:
    return (d - k) // stride + 1


def _windows(x, k, stride):
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def conv3d_valid(x, w, bias=None, stride: int = 1):
    """Valid-padding 3D cross-correlation (no kernel flip) plus per-channel bias."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_conv_shapes(x, w, stride)
    win = _windows(x, w.shape[2], stride)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :, None, None, None]
    return np.ascontiguousarray(out)


def conv3d_backward(x, w, grad, stride: int = 1):
    """Exact adjoint of ``conv3d_valid``; returns (grad_input, grad_kernel, grad_bias)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_conv_shapes(x, w, stride)
    k = w.shape[2]
    expected = (x.shape[0], w.shape[0]) + tuple(conv_output_size(d, k, stride) for d in x.shape[2:])
    if grad.shape != expected:
        raise ValueError(f"upstream gradient shape {grad.shape} does not match output shape {expected}")
    win = _windows(x, k, stride)
    gw = np.tensordot(grad, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    gb = grad.sum(axis=(0, 2, 3, 4))
    # per-window input gradients, then fold the windows back onto the input grid
    gwin = np.tensordot(grad, w, axes=([1], [0]))  # (B, ox, oy, oz, C, k, k, k)
    gx = np.zeros_like(x)
    ox, oy, oz = grad.shape[2:]
    if k**3 <= ox * oy * oz:
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gx[:, :, i:i + stride * ox:stride, j:j + stride * oy:stride,
                       l:l + stride * oz:stride] += np.moveaxis(gwin[..., i, j, l], 4, 1)
    else:
        for i in range(ox):
            for j in range(oy):
                for l in range(oz):
                    a, b, c = i * stride, j * stride, l * stride
                    gx[:, :, a:a + k, b:b + k, c:c + k] += gwin[:, i, j, l]
    return gx, gw, gb


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad):
    return np.where(np.asarray(x) > 0, grad, 0.0)


def affine(x, W, b):
    """``W @ x + b`` applied along the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != x.shape[-1]:
        raise ValueError(f"dimension mismatch: W has shape {W.shape}, x has length {x.shape[-1]}")
    return x @ W.T + b


def affine_backward(x, W, grad):
    """Returns (grad_x, grad_W, grad_b); parameter gradients are summed over the batch."""
    x2 = np.asarray(x, dtype=np.float64).reshape(-1, W.shape[1])
    g2 = np.asarray(grad, dtype=np.float64).reshape(-1, W.shape[0])
    gx = (g2 @ W).reshape(np.shape(x))
    return gx, g2.T @ x2, g2.sum(axis=0)


def sigmoid_backward(y, grad):
    return grad * y * (1.0 - y)


def flatten(x):
    """Row-major flattening of everything after the batch axis."""
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1)


def unflatten(v, shape):
    return np.asarray(v).reshape((np.shape(v)[0],) + tuple(shape))


__all__ = [
    "EPS_STANDARDIZE",
    "affine",
    "affine_backward",
    "conv3d_backward",
    "conv3d_valid",
    "conv_output_size",
    "flatten",
    "outer3",
    "outer3_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "standardize",
    "standardize_backward",
    "unflatten",
]
