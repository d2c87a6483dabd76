"""Zero-padded 2-D convolution primitives lowered to GEMM via im2col.

Backward passes are hand-written reverse mode.  Zero padding keeps outputs
the same size as inputs, which also makes the Jacobian diagonal of a plain
filter constant (the center tap) at every pixel.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, H, W, Cin) -> (B*H*W, kh*kw*Cin) patch matrix with zero padding."""
    b, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B,H,W,Cin,kh,kw)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, kh * kw * cin)


def conv2d_same(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-size convolution: x (B,H,W,Cin), weights (kh,kw,Cin,Cout)."""
    b, h, w, _ = x.shape
    kh, kw, cin, cout = weights.shape
    out = _im2col(x, kh, kw) @ weights.reshape(kh * kw * cin, cout)
    if bias is not None:
        out += bias
    return out.reshape(b, h, w, cout)


def conv2d_param_vjp(x: np.ndarray, grad_out: np.ndarray, kernel_shape) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d_same(x, W, b)) w.r.t. W and b."""
    kh, kw, cin, cout = kernel_shape
    b, h, w, _ = x.shape
    gmat = grad_out.reshape(b * h * w, cout)
    dw = _im2col(x, kh, kw).T @ gmat
    return dw.reshape(kh, kw, cin, cout), grad_out.sum(axis=(0, 1, 2))


def conv2d_input_vjp(grad_out: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. x: correlate grad_out with the spatially-flipped,
    channel-transposed kernel (exact for zero padding)."""
    w_rot = np.ascontiguousarray(weights[::-1, ::-1].transpose(0, 1, 3, 2))
    return conv2d_same(grad_out, w_rot)


def depthwise_conv2d_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Apply one 2-D kernel to every channel independently, zero padded."""
    kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B,H,W,C,kh,kw)
    return np.tensordot(windows, kernel, axes=([4, 5], [0, 1]))


def depthwise_conv2d_kernel_vjp(x: np.ndarray, grad_out: np.ndarray, kernel_shape) -> np.ndarray:
    """Gradient of sum(grad_out * depthwise_conv2d_same(x, k)) w.r.t. k."""
    kh, kw = kernel_shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return np.tensordot(grad_out, windows, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
