"""Forward and backward passes of the 3D layers used by the regression network.

Arrays are laid out ``(batch, channel, x, y, z)``. Every ``*_forward``
returns ``(output, cache)`` and the matching ``*_backward`` consumes that
cache. Convolutions can run on two backends with identical semantics:
``"numpy"`` (reference, any dtype) and ``"torch"`` (CPU kernels from
PyTorch, no autograd). Everything else is plain numpy.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
SOFTPLUS_LINEAR_ABOVE = 30.0

_torch = None


def _get_torch():
    global _torch
    if _torch is None:
        import torch

        torch.set_num_threads(int(os.environ.get("SEEDLOC_TORCH_THREADS", "1")))
        _torch = torch
    return _torch


def _cl(a):
    """Torch view of a numpy array in channels-last 3D layout (fastest CPU conv path)."""
    torch = _get_torch()
    return torch.from_numpy(a).contiguous(memory_format=torch.channels_last_3d)


def resolve_backend(backend: str | None = None) -> str:
    backend = backend or os.environ.get("SEEDLOC_BACKEND", "auto")
    if backend == "auto":
        try:
            _get_torch()
        except ImportError:
            return "numpy"
        return "torch"
    if backend not in ("numpy", "torch"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


# -- convolution -----------------------------------------------------------

def _check_conv_shapes(x, w, b):
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels but kernel expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")


def _conv_out_size(n, k, s, p):
    m = (n + 2 * p - k) // s + 1
    if m < 1:
        raise ValueError("kernel larger than padded input")
    return m


def _np_conv3d(x, w, b, stride, padding):
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # (B, X, Y, Z, O)
    y = np.moveaxis(y, 4, 1)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(y, dtype=x.dtype)


def _np_conv3d_backward(g, x, w, stride, padding):
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4])).astype(x.dtype)  # (O, C, k, k, k)
    gxp = np.zeros(xp.shape, dtype=x.dtype)
    X, Y, Z = g.shape[2:]
    for i in range(k):
        for j in range(k):
            for l in range(k):
                contrib = np.tensordot(w[:, :, i, j, l], g, axes=([0], [1]))  # (C, B, X, Y, Z)
                gxp[:, :, i:i + stride * X:stride, j:j + stride * Y:stride, l:l + stride * Z:stride] += \
                    np.moveaxis(contrib, 0, 1)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp), gw


def conv3d_forward(x, w, b=None, stride=1, padding=1, backend=None):
    """Cross-correlation of ``x`` (B, C, X, Y, Z) with ``w`` (O, C, k, k, k)."""
    _check_conv_shapes(x, w, b)
    for n in x.shape[2:]:
        _conv_out_size(n, w.shape[2], stride, padding)
    backend = resolve_backend(backend)
    if backend == "torch":
        torch = _get_torch()
        y = torch.nn.functional.conv3d(
            _cl(x), _cl(w), None if b is None else torch.from_numpy(b),
            stride=stride, padding=padding).numpy()
    else:
        y = _np_conv3d(x, w, b, stride, padding)
    return y, (x, w, b is not None, stride, padding, backend)


def conv3d_backward(grad_out, cache):
    """Returns ``(grad_input, grad_kernel, grad_bias)``; grad_bias is None without bias."""
    x, w, has_bias, stride, padding, backend = cache
    grad_out = np.asarray(grad_out, dtype=x.dtype)
    if backend == "torch":
        torch = _get_torch()
        gx, gw, gb = torch.ops.aten.convolution_backward(
            _cl(grad_out), _cl(x), _cl(w), [w.shape[0]] if has_bias else None,
            [stride] * 3, [padding] * 3, [1] * 3, False, [0] * 3, 1, [True, True, has_bias])
        gx, gw = gx.numpy(), np.ascontiguousarray(gw.numpy())
        gb = gb.numpy() if has_bias else None
        return gx, gw, gb
    gx, gw = _np_conv3d_backward(grad_out, x, w, stride, padding)
    gb = grad_out.sum(axis=(0, 2, 3, 4)) if has_bias else None
    return gx, gw, gb


def convtranspose3d_forward(x, w, b=None, backend=None):
    """Kernel-2, stride-2 transposed convolution; ``w`` is (C_in, C_out, 2, 2, 2).

    Each input voxel scatters a 2x2x2 block, so spatial dims double.
    """
    if x.ndim != 5 or w.ndim != 5 or w.shape[2:] != (2, 2, 2):
        raise ValueError(f"convtranspose3d expects 5D input and (C_in, C_out, 2, 2, 2) kernel, "
                         f"got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels but kernel expects {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[1]} output channels")
    backend = resolve_backend(backend)
    if backend == "torch":
        torch = _get_torch()
        y = torch.nn.functional.conv_transpose3d(
            _cl(x), _cl(w), None if b is None else torch.from_numpy(b), stride=2).numpy()
    else:
        B, _, X, Y, Z = x.shape
        O = w.shape[1]
        t = np.tensordot(x, w, axes=([1], [0]))  # (B, X, Y, Z, O, 2, 2, 2)
        y = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, O, 2 * X, 2 * Y, 2 * Z)
        if b is not None:
            y = y + b.reshape(1, -1, 1, 1, 1)
        y = np.ascontiguousarray(y, dtype=x.dtype)
    return y, (x, w, b is not None, backend)


def convtranspose3d_backward(grad_out, cache):
    x, w, has_bias, backend = cache
    grad_out = np.asarray(grad_out, dtype=x.dtype)
    if backend == "torch":
        torch = _get_torch()
        gx, gw, gb = torch.ops.aten.convolution_backward(
            _cl(grad_out), _cl(x), _cl(w), [w.shape[1]] if has_bias else None,
            [2] * 3, [0] * 3, [1] * 3, True, [0] * 3, 1, [True, True, has_bias])
        return gx.numpy(), np.ascontiguousarray(gw.numpy()), (gb.numpy() if has_bias else None)
    B, O = grad_out.shape[:2]
    X, Y, Z = x.shape[2:]
    g = grad_out.reshape(B, O, X, 2, Y, 2, Z, 2)
    gx = np.tensordot(g, w, axes=([1, 3, 5, 7], [1, 2, 3, 4]))  # (B, X, Y, Z, C)
    gx = np.ascontiguousarray(np.moveaxis(gx, 4, 1), dtype=x.dtype)
    gw = np.tensordot(x, g, axes=([0, 2, 3, 4], [0, 2, 4, 6])).astype(x.dtype)  # (C, O, 2, 2, 2)
    gb = grad_out.sum(axis=(0, 2, 3, 4)) if has_bias else None
    return gx, gw, gb


# -- pooling -----------------------------------------------------------------

def maxpool3d_forward(x):
    """2x2x2 max pooling with stride 2.

    Window elements are ranked in x-fastest order (x + 2y + 4z), so ties
    route to the lowest flat index of the window.
    """
    B, C, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"maxpool3d needs even spatial dims, got {(X, Y, Z)}")
    blocks = x.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2)
    # window axis order (dz, dy, dx) flattens to dx + 2 dy + 4 dz
    win = blocks.transpose(0, 1, 2, 4, 6, 7, 5, 3).reshape(B, C, X // 2, Y // 2, Z // 2, 8)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, arg)


def maxpool3d_backward(grad_out, cache):
    shape, arg = cache
    B, C, X, Y, Z = shape
    onehot = np.zeros(arg.shape + (8,), dtype=grad_out.dtype)
    np.put_along_axis(onehot, arg[..., None], grad_out[..., None], axis=-1)
    g = onehot.reshape(B, C, X // 2, Y // 2, Z // 2, 2, 2, 2).transpose(0, 1, 2, 7, 3, 6, 4, 5)
    return np.ascontiguousarray(g.reshape(shape))


# -- batch normalization -----------------------------------------------------

def _rows(a):
    """(B, C, X, Y, Z) -> (B*X*Y*Z, C); a free view when memory is channels-last."""
    return np.moveaxis(a, 1, -1).reshape(-1, a.shape[1])


def _unrows(r, shape):
    B, C, X, Y, Z = shape
    return np.moveaxis(r.reshape(B, X, Y, Z, C), -1, 1)


def batchnorm3d_forward(x, gamma, beta, running_mean=None, running_var=None, training=True,
                        momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization over batch and all spatial positions.

    In training mode the running statistics (if given) are updated in place
    and the batch statistics are used; in eval mode the running statistics
    are required.
    """
    r = _rows(x)
    if training:
        count = r.shape[0]
        mean = r.mean(axis=0, dtype=np.float64)
        centered = r - mean.astype(x.dtype)
        var = np.einsum("ij,ij->j", centered, centered, dtype=np.float64) / count
        if running_mean is not None:
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise RuntimeError("batchnorm in eval mode needs running statistics; train first")
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
        centered = r - mean.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered
    xhat *= inv_std
    y = xhat * gamma.astype(x.dtype) + beta.astype(x.dtype)
    return _unrows(y, x.shape), (xhat, inv_std, gamma, training)


def batchnorm3d_backward(grad_out, cache):
    xhat, inv_std, gamma, training = cache
    g = _rows(grad_out)
    dbeta = g.sum(axis=0, dtype=np.float64)
    dgamma = np.einsum("ij,ij->j", g, xhat, dtype=np.float64)
    scale = (gamma * inv_std).astype(g.dtype)
    if not training:
        dx = g * scale
    else:
        count = xhat.shape[0]
        mean_g = (dbeta / count).astype(g.dtype)
        mean_gx = (dgamma / count).astype(g.dtype)
        dx = xhat * -mean_gx
        dx += g
        dx -= mean_g
        dx *= scale
    return _unrows(dx, grad_out.shape), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


# -- activations -------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(grad_out, mask):
    return grad_out * mask


def softplus(x, beta=1.0):
    """``log(1 + exp(beta x)) / beta``; returns ``x`` itself once ``beta x > 30``."""
    if not beta > 0:
        raise ValueError("softplus beta must be positive")
    x = np.asarray(x)
    bx = beta * x
    out = np.log1p(np.exp(np.minimum(bx, SOFTPLUS_LINEAR_ABOVE))) / beta
    return np.where(bx > SOFTPLUS_LINEAR_ABOVE, x, out).astype(x.dtype, copy=False)


def softplus_forward(x, beta=1.0):
    return softplus(x, beta), (x, beta)


def softplus_backward(grad_out, cache):
    x, beta = cache
    sig = 0.5 * (1.0 + np.tanh(0.5 * beta * x))  # logistic, overflow-free
    return grad_out * sig.astype(grad_out.dtype, copy=False)


def activation(x, kind="relu", beta=1.0):
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "softplus":
        return softplus(x, beta)
    raise ValueError(f"unknown activation {kind!r}")
