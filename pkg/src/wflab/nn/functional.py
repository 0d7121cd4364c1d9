"""Forward/backward kernels on plain numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(grad_out, cache)``.  Convolutions are cross-correlations (no kernel
flip); max pooling routes gradient to the first maximal index.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, UninitializedStatsError


def conv_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d_forward(x, w, b, stride: int = 1, padding: int = 0):
    """x: (B, Cin, L), w: (Cout, Cin, K), b: (Cout,) -> (B, Cout, L')."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv1d: x{x.shape} w{w.shape} b{b.shape}")
    B, C, L = x.shape
    O, _, K = w.shape
    if L + 2 * padding < K:
        raise DimensionError(f"conv1d: input length {L} (+2*{padding}) shorter than kernel {K}")
    lout = conv_out_len(L, K, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    win = sliding_window_view(xp, K, axis=2)[:, :, : stride * (lout - 1) + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * lout, C * K)
    out = cols @ w.reshape(O, C * K).T
    out += b
    out = np.ascontiguousarray(out.reshape(B, lout, O).transpose(0, 2, 1))
    return out, (x.shape, cols, w, stride, padding)


def conv1d_backward(grad_out, cache):
    (B, C, L), cols, w, stride, padding = cache
    O, _, K = w.shape
    lout = grad_out.shape[2]
    g2 = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(B * lout, O)
    gw = (g2.T @ cols).reshape(w.shape)
    gb = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(O, C * K)).reshape(B, lout, C, K)
    dxp = np.zeros((B, C, L + 2 * padding), dtype=grad_out.dtype)
    span = stride * (lout - 1) + 1
    for k in range(K):
        dxp[:, :, k : k + span : stride] += dcols[:, :, :, k].transpose(0, 2, 1)
    gx = dxp[:, :, padding : padding + L] if padding else dxp
    return gx, gw, gb


def _bn_axes(x):
    if x.ndim == 3:
        return (0, 2), (None, slice(None), None)
    if x.ndim == 2:
        return (0,), (None, slice(None))
    raise DimensionError(f"batchnorm expects (B, C) or (B, C, L), got {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool, momentum=0.1, eps=1e-5):
    """Per-channel normalization over batch (and length) axes.

    Returns ``(out, new_running_mean, new_running_var, cache)``.  Train mode
    uses biased batch variance and folds it into the running stats (the first
    update adopts the batch moments outright).  Infer mode needs running stats.
    """
    axes, bc = _bn_axes(x)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is None:
            new_rm, new_rv = mean.copy(), var.copy()
        else:
            new_rm = (1 - momentum) * running_mean + momentum * mean
            new_rv = (1 - momentum) * running_var + momentum * var
    else:
        if running_mean is None or running_var is None:
            raise UninitializedStatsError("batch norm in inference mode before any running statistics exist")
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[bc]) * inv_std[bc]
    out = gamma[bc] * xhat + beta[bc]
    return out, new_rm, new_rv, (xhat, inv_std, gamma, train, axes, bc)


def batchnorm_backward(grad_out, cache):
    xhat, inv_std, gamma, train, axes, bc = cache
    ggamma = (grad_out * xhat).sum(axis=axes)
    gbeta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma[bc]
    if not train:
        return dxhat * inv_std[bc], ggamma, gbeta
    n = xhat.size // xhat.shape[1]
    gx = (inv_std[bc] / n) * (
        n * dxhat - dxhat.sum(axis=axes)[bc] - xhat * (dxhat * xhat).sum(axis=axes)[bc]
    )
    return gx, ggamma, gbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out, mask):
    return grad_out * mask


def maxpool1d_forward(x, width: int, stride: int):
    B, C, L = x.shape
    if L < width:
        raise DimensionError(f"maxpool: length {L} shorter than width {width}")
    lout = (L - width) // stride + 1
    win = sliding_window_view(x, width, axis=2)[:, :, : stride * (lout - 1) + 1 : stride]
    arg = win.argmax(axis=3)  # first index on ties
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    return out, (x.shape, arg, stride)


def maxpool1d_backward(grad_out, cache):
    shape, arg, stride = cache
    gx = np.zeros(shape, dtype=grad_out.dtype)
    lout = arg.shape[2]
    span = stride * (lout - 1) + 1
    for j in range(int(arg.max(initial=0)) + 1):
        gx[:, :, j : j + span : stride] += grad_out * (arg == j)
    return gx


def global_avgpool_forward(x):
    return x.mean(axis=2), x.shape


def global_avgpool_backward(grad_out, shape):
    return np.broadcast_to(grad_out[:, :, None] / shape[2], shape).copy()


def fc_forward(x, w, b):
    """x: (B, in), w: (out, in), b: (out,)."""
    if x.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"fc: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w.T + b, (x, w)


def fc_backward(grad_out, cache):
    x, w = cache
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / B``."""
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,) or (B and (labels.min() < 0 or labels.max() >= C)):
        raise DimensionError(f"labels must be {B} ints in [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(B), labels] - logsum
    loss = float(-logp.mean()) if B else 0.0
    grad = np.exp(z - logsum[:, None])
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / max(B, 1)


def grl_forward(x, lam=1.0):
    return x


def grl_backward(grad_out, lam):
    return (-lam) * grad_out
