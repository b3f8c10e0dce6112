"""Forward and backward passes of the layers used by the dilated network.

Arrays are laid out ``[batch, time, channels]``. Every ``*_forward`` returns
its output and a cache consumed by the matching ``*_backward``.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


def dilated_im2col(x: np.ndarray, kernel: int, dilation: int) -> np.ndarray:
    """Stack the ``kernel`` dilated taps of a zero-padded, non-causal window.

    Returns ``[batch, time, kernel * channels]`` where tap ``j`` reads
    ``x[t + (j - kernel // 2) * dilation]``.
    """
    b, t, c = x.shape
    pad = (kernel // 2) * dilation
    xp = np.zeros((b, t + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + t] = x
    return np.concatenate([xp[:, j * dilation:j * dilation + t] for j in range(kernel)], axis=2)


def col2im(dcols: np.ndarray, kernel: int, dilation: int) -> np.ndarray:
    b, t, kc = dcols.shape
    c = kc // kernel
    pad = (kernel // 2) * dilation
    dxp = np.zeros((b, t + 2 * pad, c), dtype=dcols.dtype)
    for j in range(kernel):
        dxp[:, j * dilation:j * dilation + t] += dcols[:, :, j * c:(j + 1) * c]
    return dxp[:, pad:pad + t]


def conv_forward(x, w, kernel, dilation):
    cols = dilated_im2col(x, kernel, dilation)
    return cols @ w, cols


def conv_backward(dout, cols, w, kernel, dilation, need_dx=True):
    b, t, kc = cols.shape
    dw = cols.reshape(-1, kc).T @ dout.reshape(-1, dout.shape[-1])
    dx = col2im(dout @ w.T, kernel, dilation) if need_dx else None
    return dx, dw


def batchnorm_forward(x, gamma, beta, running_mean, running_var, use_batch_stats,
                      momentum=0.1):
    """Per-channel normalisation over batch and time.

    With ``use_batch_stats`` the statistics come from ``x`` and the running
    estimates are returned updated (``None`` when no running estimate was
    given); otherwise the running estimates are used as-is.
    """
    if use_batch_stats:
        m = x.shape[0] * x.shape[1]
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        if running_mean is not None:
            unbiased = var * m / max(m - 1, 1)
            running_mean = (1 - momentum) * running_mean + momentum * mean
            running_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    out = xhat * gamma + beta
    cache = (xhat, inv_std, gamma, use_batch_stats)
    return out, cache, (running_mean, running_var)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, use_batch_stats = cache
    dgamma = (dout * xhat).sum(axis=(0, 1))
    dbeta = dout.sum(axis=(0, 1))
    dxhat = dout * gamma
    if not use_batch_stats:
        return dxhat * inv_std, dgamma, dbeta
    m = dout.shape[0] * dout.shape[1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=(0, 1))
                          - xhat * (dxhat * xhat).sum(axis=(0, 1)))
    return dx, dgamma, dbeta


def relu_dropout_forward(x, p, rng):
    """ReLU followed by inverted dropout; ``rng=None`` disables dropout."""
    out = np.maximum(x, 0)
    mask = None
    if rng is not None and p > 0:
        mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
        out = out * mask
    return out, (x > 0, mask)


def relu_dropout_backward(dout, cache):
    positive, mask = cache
    if mask is not None:
        dout = dout * mask
    return dout * positive
