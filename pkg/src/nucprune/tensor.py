"""Dense array primitives with hand-written gradients.

Tensors are plain numpy arrays laid out channel-first (``C, H, W``) or
batched (``N, C, H, W``). Every forward op is dtype preserving, so the
network runs in float32 while gradient checks can run the very same code in
float64. Each ``*_backward`` takes the upstream gradient and returns exact
analytic gradients.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes disagree; the message names the dimension."""


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C, H, W) or (N, C, H, W) array, got ndim={x.ndim}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) patches under zero 'same' padding."""
    n, c, h, w = x.shape
    if k == 1:
        return x.reshape(n, c, h * w)
    p = (k - 1) // 2
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * k * k, h * w)


def _check_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> None:
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (C_out, C_in, k, k), got ndim={kernel.ndim}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"kernel height {kh} != kernel width {kw}")
    if kh % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input channels C_in={x.shape[1]} but kernel expects C_in={c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias length {bias.shape} does not match C_out={c_out}")


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Stride-1 cross-correlation with zero 'same' padding plus bias.

    If ``cache`` is given, the im2col patches are stored under ``"cols"`` so
    the backward pass can skip rebuilding them.
    """
    xb, squeeze = _batched(x)
    _check_conv(xb, kernel, bias)
    n, _, h, w = xb.shape
    c_out, _, k, _ = kernel.shape
    cols = _im2col(xb, k)
    if cache is not None:
        cache["cols"] = cols
    out = kernel.reshape(c_out, -1) @ cols  # (N, C_out, H*W)
    out += bias[:, None]
    out = out.reshape(n, c_out, h, w)
    return out[0] if squeeze else out


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    cols: np.ndarray | None = None,
    input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``conv2d`` w.r.t. (input, kernel, bias).

    ``cols`` are the forward patches when available; with
    ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    c_out, c_in, k, _ = kernel.shape
    if gb.shape[0] != xb.shape[0] or gb.shape[1] != c_out or gb.shape[2:] != xb.shape[2:]:
        raise ShapeError(f"upstream gradient shape {grad_out.shape} does not match conv output")
    g2 = gb.reshape(gb.shape[0], c_out, -1)  # (N, C_out, H*W)
    if cols is None:
        cols = _im2col(xb, k)
    grad_kernel = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    grad_bias = g2.sum(axis=(0, 2))
    if not input_grad:
        return None, grad_kernel, grad_bias
    # input gradient is a 'same' correlation with the flipped, channel-swapped kernel
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d(gb, flipped, np.zeros(c_in, dtype=kernel.dtype))
    return (grad_x[0] if squeeze else grad_x), grad_kernel, grad_bias


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 non-overlapping max pooling."""
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got H={h}, W={w}")
    out = xb.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    return out[0] if squeeze else out


def maxpool2_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Route each window's gradient to its first row-major argmax."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    n, c, h, w = xb.shape
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # argmax returns the first occurrence
    onehot = idx[..., None] == np.arange(4)
    g = (onehot * gb[..., None]).astype(xb.dtype)
    g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return g[0] if squeeze else g


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    """Replicate every pixel into a 2x2 block."""
    xb, squeeze = _batched(x)
    out = xb.repeat(2, axis=2).repeat(2, axis=3)
    return out[0] if squeeze else out


def upsample_nearest2_backward(grad_out: np.ndarray) -> np.ndarray:
    gb, squeeze = _batched(grad_out)
    n, c, h, w = gb.shape
    g = gb.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
    return g[0] if squeeze else g


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, clipped so the result stays strictly inside (0, 1)."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    eps = np.finfo(dtype).eps
    # exp of a non-positive argument only, to stay overflow free
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype, copy=False)
    return np.clip(s, eps, 1.0 - eps)


def sigmoid_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Takes the sigmoid *output*, not its input."""
    return grad_out * out * (1.0 - out)


def identity(x: np.ndarray) -> np.ndarray:
    return x


def identity_backward(grad_out: np.ndarray) -> np.ndarray:
    return grad_out
