"""Differentiable layer primitives over :mod:`scop.core.tensor`.

All feature tensors are NCHW. Convolution and max pooling use an im2col
view built with ``sliding_window_view``; their backward passes scatter the
column gradients back with one strided add per kernel offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError
from .tensor import Tensor, as_tensor, make_op

ACTIVATIONS = ("relu", "sigmoid")


def _output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, input_shape, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: cols is (N, C, Ho, Wo, k, k)."""
    n, c, h, w = input_shape
    ho, wo = cols.shape[2], cols.shape[3]
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kernel):
        for j in range(kernel):
            padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j]
    if padding:
        padded = padded[:, :, padding:padding + h, padding:padding + w]
    return padded


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, I, k, k) kernel."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {weight.shape} must be NCHW and OIkk")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input {x.shape} has {x.shape[1]} channels but weight {weight.shape} expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    k = weight.shape[2]
    ho = _output_extent(x.shape[2], k, stride, padding)
    wo = _output_extent(x.shape[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for weight {weight.shape} (stride {stride}, padding {padding})")

    cols = _windows(x.data, k, stride, padding)
    w = weight.data
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        grad_bias = g.sum(axis=(0, 2, 3))
        grad_weight = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_cols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        grad_x = _scatter_windows(grad_cols, x.shape, k, stride, padding)
        return grad_x, grad_weight, grad_bias

    return make_op("conv2d", np.ascontiguousarray(out), (x, weight, bias), backward)


def linear(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    a, w = x.data, weight.data

    def backward(g):
        return g @ w, g.T @ a, g.sum(axis=0)

    return make_op("linear", a @ w.T + bias.data, (x, weight, bias), backward)


@dataclass(frozen=True)
class RunningStats:
    mean: np.ndarray
    var: np.ndarray


def batch_norm(
    x,
    gamma,
    beta,
    stats: RunningStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[Tensor, RunningStats]:
    """Per-channel normalization for (N, C) or (N, C, H, W) inputs.

    Returns the output and the running statistics after this call (unchanged
    in eval mode). The running variance tracks the unbiased batch variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected (N, C) or NCHW input, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)
    a = x.data
    g_ = gamma.data.reshape(view)

    if training:
        count = a.size // channels
        mu = a.mean(axis=axes, dtype=np.float64)
        var = a.var(axis=axes, dtype=np.float64)
        unbiased = var * count / max(count - 1, 1)
        stats = RunningStats(
            mean=(1.0 - momentum) * stats.mean + momentum * mu,
            var=(1.0 - momentum) * stats.var + momentum * unbiased,
        )
    else:
        mu, var = stats.mean, stats.var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (a - mu.reshape(view)) * inv_std.reshape(view)
    out = g_ * x_hat + beta.data.reshape(view)

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        d_hat = g * g_
        if training:
            count = a.size // channels
            grad_x = (inv_std.reshape(view) / count) * (
                count * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = d_hat * inv_std.reshape(view)
        return grad_x, grad_gamma, grad_beta

    return make_op("batch_norm", out, (x, gamma, beta), backward), stats


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return make_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"Unknown activation {kind!r}. Valid activations are: {', '.join(ACTIVATIONS)}")


def max_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got {x.shape}")
    ho = _output_extent(x.shape[2], kernel, stride, 0)
    wo = _output_extent(x.shape[3], kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {x.shape} smaller than kernel {kernel}")
    cols = _windows(x.data, kernel, stride, 0)
    flat = cols.reshape(*cols.shape[:4], kernel * kernel)
    winner = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        grad_cols = np.zeros(cols.shape, dtype=np.float64)
        for i in range(kernel):
            for j in range(kernel):
                grad_cols[..., i, j] = g * (winner == i * kernel + j)
        return (_scatter_windows(grad_cols, x.shape, kernel, stride, 0),)

    return make_op("max_pool2d", out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Average over the spatial extents, keeping an NC11 layout."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return x.reshape(x.shape[0], -1)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = float(np.mean(log_norm - z[rows, labels]))

    def backward(g):
        probs = np.exp(z - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (g * probs / labels.shape[0],)

    return make_op("cross_entropy", np.array(loss), (logits,), backward)
