"""im2col lowering so that 2-D convolution reuses :func:`wrapnet.kernels.gemm`."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError
from ..fxp import as_int_array


def conv_output_shape(h: int, w: int, kh: int, kw: int, stride: int = 1, pad: int = 0):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if stride < 1 or pad < 0 or ho <= 0 or wo <= 0:
        raise ShapeMismatchError(
            f"invalid geometry: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    return ho, wo


def im2col(x, kernel: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold a ``C x H x W`` tensor into a ``(C*kh*kw) x (Ho*Wo)`` matrix.

    Row index is ``(c*kh + i)*kw + j``; column index is ``oy*Wo + ox``.
    Padding uses the zero point 0.
    """
    x = np.asarray(getattr(x, "values", x))
    if x.ndim != 3:
        raise ShapeMismatchError(f"im2col expects C x H x W, got shape {x.shape}")
    C, H, W = x.shape
    kh, kw = kernel
    ho, wo = conv_output_shape(H, W, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(C * kh * kw, ho * wo)


def conv2d(x, w, mode="exact32", stride: int = 1, pad: int = 0, threads: int = 1):
    """Integer convolution ``Cout x Ho x Wo`` via im2col + gemm."""
    from . import gemm

    w = as_int_array(w)
    if w.ndim != 4:
        raise ShapeMismatchError(f"conv weights must be Cout x C x kh x kw, got {w.shape}")
    x = as_int_array(x)
    cout, cin, kh, kw = w.shape
    if x.shape[0] != cin:
        raise ShapeMismatchError(f"input has {x.shape[0]} channels, weights expect {cin}")
    ho, wo = conv_output_shape(x.shape[1], x.shape[2], kh, kw, stride, pad)
    cols = im2col(x, (kh, kw), stride, pad)
    out = gemm(cols.T, w.reshape(cout, -1).T, mode, threads=threads)
    return np.asarray(out).T.reshape(cout, ho, wo)
