"""
Forward/backward kernels for the convolutional VAE, NHWC layout, float64.

Each ``*_forward`` returns the output and a cache consumed by the matching
``*_backward``. Convolutions use zero padding and im2col; the transposed
convolution is the adjoint of a strided convolution, so its forward pass is
the input-gradient of :func:`conv_forward` and vice versa.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, Hp-k+1, Wp-k+1, C, k, k)
    win = win[:, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, k * k * C)
    return cols, Ho, Wo


def _col2im(dcols, in_shape, k, stride, pad, Ho, Wo):
    B, H, W, C = in_shape
    dcols = dcols.reshape(B, Ho, Wo, k, k, C)
    dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * (Ho - 1) + 1 : stride,
                j : j + stride * (Wo - 1) + 1 : stride, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pad : pad + H, pad : pad + W, :]


def conv_forward(x, w, stride=1, pad=2):
    """``w`` has shape ``(k, k, C_in, C_out)``; no bias."""
    k, _, cin, cout = w.shape
    cols, Ho, Wo = _im2col(x, k, stride, pad)
    y = (cols @ w.reshape(k * k * cin, cout)).reshape(x.shape[0], Ho, Wo, cout)
    return y, (cols, x.shape, w, stride, pad, Ho, Wo)


def conv_backward(dy, cache):
    cols, in_shape, w, stride, pad, Ho, Wo = cache
    k, _, cin, cout = w.shape
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    dx = _col2im(dy2 @ w.reshape(k * k * cin, cout).T, in_shape, k, stride, pad, Ho, Wo)
    return dx, dw


def conv_transpose_forward(x, w, out_hw, stride=2, pad=2):
    """Adjoint of ``conv_forward`` mapping ``(B, h, w, C_in)`` to ``(B, H, W, C_out)``.

    ``w`` has shape ``(k, k, C_out, C_in)``; ``out_hw`` fixes the output size
    (any ``H`` with ``conv_out_size(H) == h`` is valid).
    """
    k, _, cout, cin = w.shape
    B, h, ww, _ = x.shape
    H, W = out_hw
    if conv_out_size(H, k, stride, pad) != h or conv_out_size(W, k, stride, pad) != ww:
        raise ValueError(f"output size {out_hw} is not compatible with input {(h, ww)}")
    dcols = x.reshape(-1, cin) @ w.reshape(k * k * cout, cin).T
    y = _col2im(dcols, (B, H, W, cout), k, stride, pad, h, ww)
    return y, (x, w, stride, pad)


def conv_transpose_backward(dy, cache):
    x, w, stride, pad = cache
    k, _, cout, cin = w.shape
    cols, Ho, Wo = _im2col(dy, k, stride, pad)
    dx = (cols @ w.reshape(k * k * cout, cin)).reshape(x.shape)
    dw = (cols.T @ x.reshape(-1, cin)).reshape(w.shape)
    return dx, dw


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      momentum=0.9, eps=1e-5):
    """Per-channel normalization over all leading axes.

    In train mode batch statistics are used and updated running statistics
    are returned; in inference mode the running statistics are used as-is.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = momentum * running_mean + (1.0 - momentum) * mean
        new_var = momentum * running_var + (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std, gamma, train), (new_mean, new_var)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = dy.size // dy.shape[-1]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes)
                        - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def dense_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def dense_backward(dy, cache):
    x, w, has_bias = cache
    dw = x.T @ dy
    db = dy.sum(axis=0) if has_bias else None
    return dy @ w.T, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask
