"""Dense tensor operations with hand-written backward passes.

Feature maps are laid out N x C x H x W row-major, kernels Cout x Cin x
Kh x Kw.  Every operation is a pure function over numpy arrays: forward
calls return fresh outputs and backward calls recompute the cheap
intermediates they need, so no hidden state survives between calls.
The tracking pipeline runs in float32; gradient checks may feed float64
inputs and every op follows the dtype of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    """An operand's shape violates the operation's contract."""


def as_tensor(data, shape=None) -> np.ndarray:
    """Convert external data to a float32 tensor, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise ShapeMismatchError(
                f"cannot reshape {arr.size} values to shape {tuple(shape)}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_extent(extent: int, kernel: int, stride: int = 1,
                       dilation: int = 1, padding: int = 0) -> int:
    return (extent + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


# ---------------------------------------------------------------------------
# Convolution (cross-correlation semantics)
# ---------------------------------------------------------------------------

def _check_conv_args(x, kernel, bias, stride, dilation):
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv2d input must be NxCxHxW, got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d kernel must be CoutxCinxKhxKw, got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"kernel Cin={kernel.shape[1]} does not match input C={x.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeMismatchError(
            f"bias shape {bias.shape} does not match Cout={kernel.shape[0]}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")


def _im2col(x, kh, kw, stride, dilation, ph, pw):
    n, c, h, w = x.shape
    oh = conv_output_extent(h, kh, stride, dilation, ph)
    ow = conv_output_extent(w, kw, stride, dilation, pw)
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(
            f"conv output extent {oh}x{ow} < 1 for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, dilation {dilation}")
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        ii = i * dilation
        for j in range(kw):
            jj = j * dilation
            cols[:, :, i, j] = x[:, :, ii:ii + stride * oh:stride,
                                 jj:jj + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, dilation, ph, pw, oh, ow):
    n, c, h, w = x_shape
    grad = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        ii = i * dilation
        for j in range(kw):
            jj = j * dilation
            grad[:, :, ii:ii + stride * oh:stride,
                 jj:jj + stride * ow:stride] += cols[:, :, i, j]
    if ph or pw:
        grad = grad[:, :, ph:ph + h, pw:pw + w]
    return grad


def conv2d(x, kernel, bias, stride=1, dilation=1, padding=0) -> np.ndarray:
    """2-D convolution of NxCxHxW input with a CoutxCinxKhxKw kernel."""
    x, kernel, bias = np.asarray(x), np.asarray(kernel), np.asarray(bias)
    _check_conv_args(x, kernel, bias, stride, dilation)
    ph, pw = _pair(padding)
    cout, _, kh, kw = kernel.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, dilation, ph, pw)
    out = kernel.reshape(cout, -1) @ cols
    out += bias.reshape(1, cout, 1)
    return out.reshape(x.shape[0], cout, oh, ow)


def conv2d_backward(x, kernel, grad_out, stride=1, dilation=1, padding=0,
                    need_input_grad=True):
    """Gradients of conv2d w.r.t. input, kernel and bias.

    Pass need_input_grad=False to skip the input gradient (None is
    returned in its place) when the input is a training leaf.
    """
    x, kernel, grad_out = np.asarray(x), np.asarray(kernel), np.asarray(grad_out)
    ph, pw = _pair(padding)
    n = x.shape[0]
    cout, _, kh, kw = kernel.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, dilation, ph, pw)
    g = grad_out.reshape(n, cout, oh * ow)
    grad_bias = g.sum(axis=(0, 2))
    grad_kernel = (g @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    if not need_input_grad:
        return None, grad_kernel, grad_bias
    grad_cols = kernel.reshape(cout, -1).T @ g
    grad_x = _col2im(grad_cols, x.shape, kh, kw, stride, dilation, ph, pw, oh, ow)
    return grad_x, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# Pointwise / normalization layers
# ---------------------------------------------------------------------------

def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def relu_backward(x, grad_out) -> np.ndarray:
    # Gradient is zero at x <= 0, including exactly at the kink.
    return np.where(np.asarray(x) > 0, grad_out, 0)


def lrn(x, size=5, k=2.0, alpha=1e-4, beta=0.75) -> np.ndarray:
    """Local response normalization across a channel window."""
    _check_lrn_size(size)
    x = np.asarray(x)
    scale = k + (alpha / size) * _channel_window_sum(x * x, size)
    return x * scale ** (-beta)


def lrn_backward(x, grad_out, size=5, k=2.0, alpha=1e-4, beta=0.75) -> np.ndarray:
    _check_lrn_size(size)
    x = np.asarray(x)
    scale = k + (alpha / size) * _channel_window_sum(x * x, size)
    inner = _channel_window_sum(grad_out * x * scale ** (-beta - 1.0), size)
    return grad_out * scale ** (-beta) - (2.0 * alpha * beta / size) * x * inner


def _check_lrn_size(size):
    if size < 1 or size % 2 == 0:
        raise ValueError(f"lrn window size must be a positive odd int, got {size}")


def _channel_window_sum(v, size):
    half = size // 2
    c = v.shape[1]
    padded = np.pad(v, ((0, 0), (half, half), (0, 0), (0, 0)))
    out = np.zeros_like(v)
    for offset in range(size):
        out += padded[:, offset:offset + c]
    return out


def maxpool2d(x, kernel, stride) -> np.ndarray:
    out, _ = _maxpool_with_argmax(np.asarray(x), kernel, stride)
    return out


def maxpool2d_backward(x, grad_out, kernel, stride) -> np.ndarray:
    """Route pooled gradients to each window's argmax (first occurrence)."""
    x = np.asarray(x)
    _, arg = _maxpool_with_argmax(x, kernel, stride)
    oh, ow = arg.shape[2], arg.shape[3]
    grad = np.zeros_like(x, dtype=grad_out.dtype)
    for idx in range(kernel * kernel):
        i, j = divmod(idx, kernel)
        grad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
            np.where(arg == idx, grad_out, 0)
    return grad


def _maxpool_with_argmax(x, kernel, stride):
    if x.ndim != 4:
        raise ShapeMismatchError(f"maxpool input must be NxCxHxW, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeMismatchError(
            f"pool kernel {kernel} exceeds spatial extent {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    best = None
    arg = None
    # Row-major window scan with strict '>' keeps the first occurrence on ties.
    for idx in range(kernel * kernel):
        i, j = divmod(idx, kernel)
        v = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
        if best is None:
            best = v.copy()
            arg = np.zeros(v.shape, dtype=np.int32)
        else:
            better = v > best
            np.copyto(best, v, where=better)
            arg[better] = idx
    return best, arg


def softmax2(logits) -> np.ndarray:
    """Two-class softmax over the last axis, stabilized by max subtraction."""
    logits = np.asarray(logits)
    if logits.shape[-1] != 2:
        raise ShapeMismatchError(
            f"softmax2 expects a trailing class axis of 2, got {logits.shape}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax2_backward(probs, grad_probs) -> np.ndarray:
    probs = np.asarray(probs)
    dot = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - dot)


def global_avg_pool(x) -> np.ndarray:
    """Mean over the two trailing spatial axes (CxHxW -> C, NxCxHxW -> NxC)."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeMismatchError(f"expected at least CxHxW input, got {x.shape}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ShapeMismatchError("empty spatial extent")
    return x.mean(axis=(-2, -1))


def global_avg_pool_backward(grad, spatial) -> np.ndarray:
    h, w = spatial
    grad = np.asarray(grad)
    return np.broadcast_to(grad[..., None, None] / (h * w),
                           grad.shape + (h, w)).copy()


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

@dataclass
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(param, grad, velocity, cfg: SgdConfig) -> np.ndarray:
    """One momentum-SGD update, in place on `param` and `velocity`."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeMismatchError(
            f"param {param.shape}, grad {grad.shape} and velocity "
            f"{velocity.shape} must share a shape")
    velocity *= cfg.momentum
    velocity += grad
    if cfg.weight_decay:
        velocity += cfg.weight_decay * param
    param -= cfg.learning_rate * velocity
    return param


def numeric_grad(f, x, eps=1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, in float64."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
