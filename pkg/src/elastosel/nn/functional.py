"""Forward/backward kernels on NCHW arrays.

Everything runs in the dtype of its inputs: float32 for training, float64
when checking gradients against finite differences.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConvLayer:
    """Cross-correlation layer, ``weights[out_ch, in_ch, kh, kw]``."""

    kind = "conv"

    def __init__(self, weights, bias, stride=1, padding=0):
        self.weights = np.asarray(weights)
        self.bias = np.asarray(bias)
        self.stride = int(stride)
        self.padding = int(padding)
        o, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.bias.shape != (o,):
            raise ValueError("bias must have one entry per output channel")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


class BatchNormLayer:
    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = np.ones(channels, dtype)
        self.beta = np.zeros(channels, dtype)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_output_shape(h, w, kh, kw, stride, padding):
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    w = layer.weights
    o, c, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"input channels {x.shape[1] if x.ndim == 4 else '?'} != layer in_ch {c}")
    ho, wo = conv_output_shape(x.shape[2], x.shape[3], kh, kw, layer.stride, layer.padding)
    if ho < 1 or wo < 1:
        raise ValueError("degenerate output dimensions")
    win = _windows(x, kh, kw, layer.stride, layer.padding)  # n c ho wo kh kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # n ho wo o
    out += layer.bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    w = layer.weights
    o, c, kh, kw = w.shape
    s, p = layer.stride, layer.padding
    n, _, h, wd = x.shape
    ho, wo = conv_output_shape(h, wd, kh, kw, s, p)
    if grad_out.shape != (n, o, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(n, o, ho, wo)}")
    win = _windows(x, kh, kw, s, p)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # o c kh kw
    grad_b = grad_out.sum(axis=(0, 2, 3))
    gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=np.result_type(x, grad_out))
    # n o ho wo, o c kh kw -> n ho wo c kh kw
    cols = np.tensordot(grad_out.transpose(0, 2, 3, 1), w, axes=([3], [0]))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, p:p + h, p:p + wd] if p else gxp
    return np.ascontiguousarray(grad_x), grad_w.astype(w.dtype, copy=False), grad_b.astype(w.dtype, copy=False)


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer):
    """Return ``(out, cache)``; train mode also updates the running statistics."""
    g = layer.gamma.reshape(1, -1, 1, 1)
    b = layer.beta.reshape(1, -1, 1, 1)
    if layer.mode == "infer":
        inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
        xhat = (x - layer.running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        return (g * xhat + b).astype(x.dtype, copy=False), None
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ValueError("batch norm in train mode needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + layer.eps)).astype(x.dtype)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    m = layer.momentum
    layer.running_mean = (m * layer.running_mean + (1 - m) * mean).astype(layer.running_mean.dtype)
    layer.running_var = (m * layer.running_var + (1 - m) * var).astype(layer.running_var.dtype)
    return (g * xhat + b).astype(x.dtype, copy=False), (xhat, inv)


def batchnorm_backward(grad_out: np.ndarray, cache, layer: BatchNormLayer):
    """Train-mode gradients: ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    count = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    dxhat = grad_out * layer.gamma.reshape(1, -1, 1, 1)
    grad_x = (inv.reshape(1, -1, 1, 1) / count) * (
        count * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    return grad_x, grad_gamma, grad_beta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def global_avg_pool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, grad_out):
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def dense_forward(x, weights, bias):
    if x.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ValueError(f"feature mismatch: input {x.shape}, weights {weights.shape}")
    return x @ weights.T + bias


def dense_backward(x, weights, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise ValueError("grad_out shape mismatch")
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy; returns ``(loss, probs, grad_logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    return loss, probs, grad / n
