"""Convolution and pooling primitives (im2col + BLAS matmul).

Cross-correlation convention (no kernel flip). "same" padding pads with
zeros, split evenly with the extra zero on the right/bottom, so the output
length is ceil(T / stride) per axis.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import _lift, _make


def _same_pad(t, k, stride):
    t_out = -(-t // stride)  # ceil
    total = max((t_out - 1) * stride + k - t, 0)
    return t_out, total // 2, total - total // 2


def _valid_out(t, k, stride, opname):
    if k > t:
        raise DimensionError(f"{opname}: kernel {k} wider than input {t} (valid padding)")
    return (t - k) // stride + 1, 0, 0


def conv1d(x, kernel, stride=1, padding="same"):
    """x: [T, Cin] or [B, T, Cin]; kernel: [k, Cin, Cout] -> [.., T', Cout]."""
    x, kernel = _lift(x), _lift(kernel)
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d kernel must be [k, Cin, Cout], got {kernel.shape}")
    if stride < 1 or kernel.shape[0] < 1:
        raise DimensionError("conv1d: stride and kernel width must be >= 1")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[2] != kernel.shape[1]:
        raise DimensionError(
            f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    b, t, cin = xd.shape
    k, _, cout = kernel.shape
    if padding == "same":
        t_out, pl, pr = _same_pad(t, k, stride)
    elif padding == "valid":
        t_out, pl, pr = _valid_out(t, k, stride, "conv1d")
    else:
        raise DimensionError(f"conv1d: unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), (pl, pr), (0, 0)))
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, idx, :]  # [B, T', k, Cin]
    out_data = (cols.reshape(b * t_out, k * cin)
                @ kernel.data.reshape(k * cin, cout)).reshape(b, t_out, cout)

    def bwd(g):
        g3 = g[None] if squeeze else g
        gflat = g3.reshape(b * t_out, cout)
        if kernel.requires_grad:
            gw = cols.reshape(b * t_out, k * cin).T @ gflat
            kernel._accum(gw.reshape(k, cin, cout))
        if x.requires_grad:
            gcols = (gflat @ kernel.data.reshape(k * cin, cout).T
                     ).reshape(b, t_out, k, cin)
            gxp = np.zeros_like(xp)
            for o in range(k):
                gxp[:, o : o + stride * (t_out - 1) + 1 : stride, :] += gcols[:, :, o, :]
            gx = gxp[:, pl : pl + t, :]
            x._accum(gx[0] if squeeze else gx)

    return _make(out_data[0] if squeeze else out_data, bwd, x, kernel)


def conv2d(x, kernel, stride=(1, 1), padding="same"):
    """x: [H, W, Cin] or [B, H, W, Cin]; kernel: [kh, kw, Cin, Cout]."""
    x, kernel = _lift(x), _lift(kernel)
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [kh, kw, Cin, Cout], got {kernel.shape}")
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise DimensionError("conv2d: strides must be >= 1")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[3] != kernel.shape[2]:
        raise DimensionError(
            f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    b, h, w, cin = xd.shape
    kh, kw, _, cout = kernel.shape
    if padding == "same":
        h_out, pt, pb = _same_pad(h, kh, sh)
        w_out, pleft, pright = _same_pad(w, kw, sw)
    elif padding == "valid":
        h_out, pt, pb = _valid_out(h, kh, sh, "conv2d")
        w_out, pleft, pright = _valid_out(w, kw, sw, "conv2d")
    else:
        raise DimensionError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), (pt, pb), (pleft, pright), (0, 0)))
    ih = np.arange(h_out)[:, None] * sh + np.arange(kh)[None, :]  # [H', kh]
    iw = np.arange(w_out)[:, None] * sw + np.arange(kw)[None, :]  # [W', kw]
    # gather to [B, H', kh, W', kw, Cin] then reorder to [B, H', W', kh, kw, Cin]
    cols = xp[:, ih[:, :, None, None], iw[None, None, :, :], :]
    cols = cols.transpose(0, 1, 3, 2, 4, 5)
    flat = cols.reshape(b * h_out * w_out, kh * kw * cin)
    out_data = (flat @ kernel.data.reshape(kh * kw * cin, cout)
                ).reshape(b, h_out, w_out, cout)

    def bwd(g):
        g4 = g[None] if squeeze else g
        gflat = g4.reshape(b * h_out * w_out, cout)
        if kernel.requires_grad:
            gw = flat.T @ gflat
            kernel._accum(gw.reshape(kh, kw, cin, cout))
        if x.requires_grad:
            gcols = (gflat @ kernel.data.reshape(kh * kw * cin, cout).T
                     ).reshape(b, h_out, w_out, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for oh in range(kh):
                rows = slice(oh, oh + sh * (h_out - 1) + 1, sh)
                for ow in range(kw):
                    cols_ = slice(ow, ow + sw * (w_out - 1) + 1, sw)
                    gxp[:, rows, cols_, :] += gcols[:, :, :, oh, ow, :]
            gx = gxp[:, pt : pt + h, pleft : pleft + w, :]
            x._accum(gx[0] if squeeze else gx)

    return _make(out_data[0] if squeeze else out_data, bwd, x, kernel)


def maxpool1d_w2(x):
    """Width-2 stride-1 max pool with a single zero pad on the right.

    Output length equals input length; ties route the gradient to the
    earlier position.
    """
    x = _lift(x)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    b, t, c = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 1), (0, 0)))
    a, bb = xp[:, :t, :], xp[:, 1 : t + 1, :]
    first = a >= bb
    out_data = np.where(first, a, bb)

    def bwd(g):
        g3 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gxp[:, :t, :] += g3 * first
        gxp[:, 1 : t + 1, :] += g3 * ~first
        gx = gxp[:, :t, :]
        x._accum(gx[0] if squeeze else gx)

    return _make(out_data[0] if squeeze else out_data, bwd, x)
