"""Numpy kernel implementations (the fallback backend).

All reductions accumulate in float64 and round to float32 once per layer
output; this matches the compiled kernels and keeps results stable enough for
bit-level regression pinning. Layouts are NCHW for feature maps, (out, in,
kh, kw) for conv weights and (out, in) for dense weights.
"""

from __future__ import annotations

import numpy as np


def im2col(x: np.ndarray, kernel, stride, padding) -> np.ndarray:
    """Unfold NCHW input into a (N*OH*OW, C*kh*kw) float32 patch matrix.

    Column order is (channel, ky, kx), the documented reduction order.
    """
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]              # (N, C, OH, OW, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5)       # (N, OH, OW, C, kh, kw)
    return np.ascontiguousarray(cols.reshape(n * oh * ow, c * kh * kw), dtype=np.float32)


def conv_output_hw(h: int, w: int, kernel, stride, padding) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def conv2d_cols(cols: np.ndarray, batch: int, out_hw, weight: np.ndarray,
                bias: np.ndarray | None) -> np.ndarray:
    """Convolution as a GEMM over a precomputed patch matrix (f32 or f64)."""
    o = weight.shape[0]
    wmat = weight.reshape(o, -1).astype(np.float64)
    if cols.dtype != np.float64:
        cols = cols.astype(np.float64)
    acc = cols @ wmat.T
    if bias is not None:
        acc += bias.astype(np.float64)
    oh, ow = out_hw
    out = acc.astype(np.float32).reshape(batch, oh, ow, o)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
           stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    n = x.shape[0]
    out_hw = conv_output_hw(x.shape[2], x.shape[3], weight.shape[2:], stride, padding)
    cols = im2col(x, weight.shape[2:], stride, padding)
    return conv2d_cols(cols, n, out_hw, weight, bias)


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    acc = x.astype(np.float64) @ weight.T.astype(np.float64)
    if bias is not None:
        acc += bias.astype(np.float64)
    return acc.astype(np.float32)


def maxpool2d(x: np.ndarray, pool, stride) -> np.ndarray:
    kh, kw = pool
    sh, sw = stride
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]
    return np.ascontiguousarray(windows.max(axis=(-2, -1)))
