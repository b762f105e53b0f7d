"""Forward/backward kernels for the layer set. Activations are NCHW float64 arrays."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


def _pad_amount(padding, k: int) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        # extra row/column goes after, as in most frameworks
        total = k - 1
        return total // 2, total - total // 2
    if isinstance(padding, int) and padding >= 0:
        return padding, padding
    raise ValueError(f"unknown padding {padding!r}")


def conv_output_size(size: int, k: int, stride: int, padding) -> int:
    lo, hi = _pad_amount(padding, k)
    return (size + lo + hi - k) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    (ph0, ph1), (pw0, pw1) = _pad_amount(padding, kh), _pad_amount(padding, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1))) if (ph0 or ph1 or pw0 or pw1) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, xp.shape, ho, wo


def conv2d_forward(x, kernel, bias, stride=1, padding="same"):
    """Cross-correlation plus bias. Returns ``(out, cache)``."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv input {x.shape} incompatible with kernel {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")
    o, c, kh, kw = kernel.shape
    b = x.shape[0]
    cols, padded_shape, ho, wo = _im2col(x, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {x.shape} too small for kernel {kernel.shape}")
    out = cols @ kernel.reshape(o, -1).T + bias
    out = np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, padded_shape, kernel, stride, padding)


def conv2d_backward(dout, cache, input_grad=True):
    """Returns ``(dx, dkernel, dbias)``; ``dx`` is None when ``input_grad`` is false."""
    cols, x_shape, padded_shape, kernel, stride, padding = cache
    o, c, kh, kw = kernel.shape
    b, _, ho, wo = dout.shape
    if dout.shape[1] != o or cols.shape[0] != b * ho * wo:
        raise DimensionError(f"upstream gradient {dout.shape} does not match forward pass")
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dkernel = (dmat.T @ cols).reshape(kernel.shape)
    dbias = dmat.sum(axis=0)
    if not input_grad:
        return None, dkernel, dbias
    # scatter one kernel tap at a time into a channels-last buffer
    dxp = np.zeros((b, padded_shape[2], padded_shape[3], c), dtype=dout.dtype)
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))
    for i in range(kh):
        for j in range(kw):
            tap = (dmat @ taps[i, j]).reshape(b, ho, wo, c)
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += tap
    (ph0, _), (pw0, _) = _pad_amount(padding, kh), _pad_amount(padding, kw)
    dx = dxp[:, ph0 : ph0 + x_shape[2], pw0 : pw0 + x_shape[3], :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dkernel, dbias


def batchnorm_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None, momentum=0.9, eps=1e-5):
    """Per-channel normalisation over (batch, height, width) or batch for 2-D input.

    In train mode the running statistics arrays are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm params {gamma.shape}/{beta.shape} do not match input {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("train-mode batch normalisation needs at least 2 samples")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, axes, shape)


def batchnorm_backward(dout, cache):
    """Gradient of the train-mode forward. Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, axes, shape = cache
    if dout.shape != xhat.shape:
        raise DimensionError(f"upstream gradient {dout.shape} does not match forward output {xhat.shape}")
    m = xhat.size // xhat.shape[1]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dx = (gamma * inv_std).reshape(shape) / m * (m * dout - dbeta.reshape(shape) - xhat * dgamma.reshape(shape))
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x, window=2, stride=None):
    stride = stride or window
    if x.ndim != 4 or x.shape[2] < window or x.shape[3] < window:
        raise DimensionError(f"input {x.shape} too small for {window}x{window} pooling")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    flat = win.reshape(b, c, ho, wo, window * window)
    # argmax returns the first maximal index, which fixes the tie-break
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, window, stride)


def maxpool_backward(dout, cache):
    arg, x_shape, window, stride = cache
    if dout.shape != arg.shape:
        raise DimensionError(f"upstream gradient {dout.shape} does not match pooled output {arg.shape}")
    b, c, ho, wo = arg.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for p in range(window * window):
        i, j = divmod(p, window)
        dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == p, dout, 0.0)
    return dx


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise DimensionError(f"global average pooling expects NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, x_shape):
    b, c, h, w = x_shape
    if dout.shape != (b, c):
        raise DimensionError(f"upstream gradient {dout.shape} does not match ({b}, {c})")
    return np.broadcast_to((dout / (h * w))[:, :, None, None], x_shape).copy()


def dense_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight + bias, x


def dense_backward(dout, x, weight):
    """Returns ``(dx, dweight, dbias)``."""
    if dout.shape != (x.shape[0], weight.shape[1]):
        raise DimensionError(f"upstream gradient {dout.shape} does not match dense output")
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def softmax_forward(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout, probs):
    return probs * (dout - (dout * probs).sum(axis=-1, keepdims=True))


def sparse_ce_loss(probs, labels, atol=1e-6):
    """Mean negative log-probability of the true classes.

    Returns ``(loss, dlogits)`` where ``dlogits`` is the gradient with respect
    to the pre-softmax logits, ``(probs - onehot) / batch``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"labels must lie in 0..{probs.shape[1] - 1}")
    if not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise ValueError("probability rows must sum to 1")
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
