"""Deterministic float32 tensor ops for CPU inference.

Tensors are plain numpy float32 arrays. Every op is a pure function:
identical inputs give bit-identical outputs. Reductions accumulate in
float64 and cast back to float32 once, so results do not depend on
BLAS blocking or thread count.
"""

import numpy as np

from .errors import ArgumentError, DimensionError


def matmul(a, b):
    """Matrix product of two 2-D float32 arrays.

    Accumulates each dot product in float64 over ascending k and casts
    the result to float32 once, which matches a naive triple loop
    bit-for-bit.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _out_extent(size, kernel, stride, pad, what):
    span = size + 2 * pad - kernel
    if span < 0:
        raise DimensionError(f"{what}: kernel {kernel} exceeds padded extent {size + 2 * pad}")
    if span % stride != 0:
        raise DimensionError(
            f"{what}: extent {size} with pad {pad}, kernel {kernel} not divisible by stride {stride}"
        )
    return span // stride + 1


def _im2col(x, kh, kw, stride, pad):
    # (N, C, H, W) -> (N*H_out*W_out, C*kh*kw), patch layout row-major over (C, kh, kw)
    n, c, h, w = x.shape
    h_out = _out_extent(h, kh, stride, pad, "conv2d")
    w_out = _out_extent(w, kw, stride, pad, "conv2d")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)
    return np.ascontiguousarray(cols), h_out, w_out


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution, NCHW input and (F, C, kh, kw) kernel.

    Implemented as im2col plus the f64-accumulating matmul; bias is added
    inside the f64 expression before the single cast to float32.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channels differ: input {x.shape[1]} vs kernel {w.shape[1]}")
    n = x.shape[0]
    f = w.shape[0]
    cols, h_out, w_out = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    acc = cols.astype(np.float64) @ w.reshape(f, -1).astype(np.float64).T
    if b is not None:
        acc = acc + np.asarray(b, dtype=np.float64)
    out = acc.astype(np.float32)
    return out.reshape(n, h_out, w_out, f).transpose(0, 3, 1, 2)


def fc(x, w, b=None):
    """Fully connected layer: x (N, D) with weights (OUT, D)."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"fc expects 2-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"fc features differ: input {x.shape[1]} vs weights {w.shape[1]}")
    acc = x.astype(np.float64) @ w.astype(np.float64).T
    if b is not None:
        acc = acc + np.asarray(b, dtype=np.float64)
    return acc.astype(np.float32)


def relu(x):
    return np.maximum(np.asarray(x), np.float32(0.0))


def add(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return a + b


def maxpool2d(x, kernel, stride):
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {x.shape}")
    h_out = _out_extent(x.shape[2], kernel, stride, 0, "maxpool2d")
    w_out = _out_extent(x.shape[3], kernel, stride, 0, "maxpool2d")
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    out = windows.max(axis=(4, 5))
    assert out.shape[2:] == (h_out, w_out)
    return out


def global_avgpool(x):
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avgpool expects 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)


def flatten(x):
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1)


def batchnorm(x, scale, shift):
    """Per-channel affine transform (folded-statistics form)."""
    x = np.asarray(x)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if x.ndim == 4:
        if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
            raise DimensionError(f"batchnorm channel mismatch: {x.shape} vs {scale.shape}")
        acc = x.astype(np.float64) * scale[None, :, None, None] + shift[None, :, None, None]
    elif x.ndim == 2:
        if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
            raise DimensionError(f"batchnorm feature mismatch: {x.shape} vs {scale.shape}")
        acc = x.astype(np.float64) * scale[None, :] + shift[None, :]
    else:
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    return acc.astype(np.float32)


def softmax(logits):
    """Row-wise softmax with max subtraction, computed in float64."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError(f"softmax expects 2-D logits, got {z.shape}")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def _check_batch(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"expected 2-D logits, got {logits.shape}")
    if logits.shape[0] == 0:
        raise ArgumentError("empty batch")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ArgumentError("label outside class range")
    return logits, labels


def cross_entropy(logits, labels):
    """Mean negative log-likelihood over the batch, as a python float."""
    logits, labels = _check_batch(logits, labels)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(z.shape[0]), labels]
    return float((log_norm - picked).mean())


def top1_accuracy(logits, labels):
    """Fraction of rows whose argmax equals the label (first max wins ties)."""
    logits, labels = _check_batch(logits, labels)
    return float((logits.argmax(axis=1) == labels).mean())
