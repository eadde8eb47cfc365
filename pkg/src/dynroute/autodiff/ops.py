"""Convolution, pooling, upsampling, and dense ops on NCHW tensors.

All ops take and return Tensors, record onto the active tape, and keep
the shape arithmetic of standard convolution:
    out = floor((in + 2*pad - kernel) / stride) + 1
Depthwise separable 3x3 convolutions use padding 1 in both strides.
Bilinear upsampling follows the align-corners-false convention: output
pixel i samples source coordinate (i + 0.5) / 2 - 0.5, clamped at edges.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor, record


def _require_nchw(name: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ConfigurationError(f"{name}: expected a B,C,H,W tensor, got shape {x.data.shape}")


def conv2d_1x1(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Pointwise convolution. Weight shape (C_out, C_in)."""
    _require_nchw("conv2d_1x1", x)
    if stride not in (1, 2):
        raise ConfigurationError(f"conv2d_1x1: stride must be 1 or 2, got {stride}")
    if w.data.ndim != 2 or w.data.shape[1] != x.data.shape[1]:
        raise ConfigurationError(
            f"conv2d_1x1: weight {w.data.shape} does not match input channels "
            f"{x.data.shape[1]}"
        )
    xs = x.data[:, :, ::stride, ::stride]
    out = np.einsum("oc,bchw->bohw", w.data, xs)
    x_shape = x.data.shape
    w_data = w.data

    def backward(g):
        gxs = np.einsum("oc,bohw->bchw", w_data, g)
        gx = np.zeros(x_shape)
        gx[:, :, ::stride, ::stride] = gxs
        gw = np.einsum("bohw,bchw->oc", g, xs)
        return gx, gw

    return record((x, w), out, backward)


def depthwise_separable_conv3x3(
    x: Tensor,
    w_dw: Tensor,
    w_pw: Tensor,
    b_pw: Tensor | None = None,
    stride: int = 1,
) -> Tensor:
    """3x3 depthwise conv (padding 1) followed by a 1x1 pointwise conv.

    w_dw: (C_in, 3, 3); w_pw: (C_out, C_in); b_pw: (C_out,) or None.
    """
    _require_nchw("depthwise_separable_conv3x3", x)
    if stride not in (1, 2):
        raise ConfigurationError(f"depthwise_separable_conv3x3: stride must be 1 or 2, got {stride}")
    B, C, H, W = x.data.shape
    if w_dw.data.shape != (C, 3, 3):
        raise ConfigurationError(
            f"depthwise_separable_conv3x3: depthwise weight {w_dw.data.shape} "
            f"does not match input channels {C}"
        )
    if w_pw.data.ndim != 2 or w_pw.data.shape[1] != C:
        raise ConfigurationError(
            f"depthwise_separable_conv3x3: pointwise weight {w_pw.data.shape} "
            f"does not match input channels {C}"
        )
    oh = (H + 2 - 3) // stride + 1
    ow = (W + 2 - 3) // stride + 1
    xp = np.zeros((B, C, H + 2, W + 2))
    xp[:, :, 1 : 1 + H, 1 : 1 + W] = x.data

    t = np.zeros((B, C, oh, ow))
    for u in range(3):
        for v in range(3):
            t += (
                w_dw.data[:, u, v][None, :, None, None]
                * xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
            )
    out = np.einsum("oc,bchw->bohw", w_pw.data, t)
    if b_pw is not None:
        out = out + b_pw.data[None, :, None, None]

    w_dw_data, w_pw_data = w_dw.data, w_pw.data

    def backward(g):
        gt = np.einsum("oc,bohw->bchw", w_pw_data, g)
        g_pw = np.einsum("bohw,bchw->oc", g, t)
        g_b = g.sum(axis=(0, 2, 3)) if b_pw is not None else None
        g_dw = np.zeros_like(w_dw_data)
        gxp = np.zeros_like(xp)
        for u in range(3):
            for v in range(3):
                sl = xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
                g_dw[:, u, v] = (gt * sl).sum(axis=(0, 2, 3))
                gxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                    w_dw_data[:, u, v][None, :, None, None] * gt
                )
        gx = gxp[:, :, 1 : 1 + H, 1 : 1 + W]
        if b_pw is not None:
            return gx, g_dw, g_pw, g_b
        return gx, g_dw, g_pw

    inputs = (x, w_dw, w_pw) if b_pw is None else (x, w_dw, w_pw, b_pw)
    return record(inputs, out, backward)


def avg_pool_to(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling to a fixed output size.

    Region boundaries follow floor(i*H/oh) .. ceil((i+1)*H/oh); with an
    output larger than the input this degenerates to replication.
    """
    _require_nchw("avg_pool_to", x)
    B, C, H, W = x.data.shape
    rows = [(i * H // out_h, -(-(i + 1) * H // out_h)) for i in range(out_h)]
    cols = [(j * W // out_w, -(-(j + 1) * W // out_w)) for j in range(out_w)]
    out = np.empty((B, C, out_h, out_w))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    x_shape = x.data.shape

    def backward(g):
        gx = np.zeros(x_shape)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i : i + 1, j : j + 1] / area
        return (gx,)

    return record((x,), out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dimensions, returning (B, C)."""
    _require_nchw("global_avg_pool", x)
    B, C, H, W = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W)).copy(),)

    return record((x,), out, backward)


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Dense layer: (B, F) @ (F, O) + (O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ConfigurationError(
            f"fully_connected: shapes {x.data.shape} @ {w.data.shape} do not conform"
        )
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    x_data, w_data = x.data, w.data

    def backward(g):
        gx = g @ w_data.T
        gw = x_data.T @ g
        if b is not None:
            return gx, gw, g.sum(axis=0)
        return gx, gw

    inputs = (x, w) if b is None else (x, w, b)
    return record(inputs, out, backward)


def _upsample_axis_coeffs(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.intp)
    frac = src - i0
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    return lo, hi, 1.0 - frac, frac


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double the spatial size with bilinear interpolation (align corners false)."""
    _require_nchw("bilinear_upsample_2x", x)
    B, C, H, W = x.data.shape
    r0, r1, wr0, wr1 = _upsample_axis_coeffs(H)
    c0, c1, wc0, wc1 = _upsample_axis_coeffs(W)
    tmp = x.data[:, :, r0, :] * wr0[:, None] + x.data[:, :, r1, :] * wr1[:, None]
    out = tmp[:, :, :, c0] * wc0 + tmp[:, :, :, c1] * wc1

    def backward(g):
        gtmp = np.zeros((B, C, 2 * H, W))
        np.add.at(gtmp, (slice(None), slice(None), slice(None), c0), g * wc0)
        np.add.at(gtmp, (slice(None), slice(None), slice(None), c1), g * wc1)
        gx = np.zeros((B, C, H, W))
        np.add.at(gx, (slice(None), slice(None), r0), gtmp * wr0[:, None])
        np.add.at(gx, (slice(None), slice(None), r1), gtmp * wr1[:, None])
        return (gx,)

    return record((x,), out, backward)
