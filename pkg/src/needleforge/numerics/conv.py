"""Convolution (cross-correlation) and batch normalization kernels.

Both convs lower to a single GEMM over an im2col buffer. Inputs may be
unbatched (``C x L`` / ``C x H x W``) or carry a leading batch axis.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, DimensionError, Tensor, _unbroadcast, make_op


def same_padding(length: int, width: int, stride: int) -> tuple[int, int, int]:
    """Return (pad_left, pad_right, out_length) for ceil-division "same" padding."""
    out = -(-length // stride)
    total = max((out - 1) * stride + width - length, 0)
    left = total // 2
    return left, total - left, out


def _resolve_padding(length: int, width: int, stride: int, padding) -> tuple[int, int, int]:
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if length < 1:
        raise DimensionError("convolution over an empty input")
    if padding == "same":
        left, right, out = same_padding(length, width, stride)
    elif padding == "valid":
        left = right = 0
        if width > length:
            raise DimensionError(f"kernel width {width} exceeds input length {length}")
        out = (length - width) // stride + 1
    else:
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    if width > length + left + right:
        raise DimensionError(f"kernel width {width} exceeds padded input length {length + left + right}")
    return left, right, out


def conv1d(x: Tensor, k: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """y[o, i] = sum_{c, j} x[c, i*stride + j - pad] * k[o, c, j]."""
    if x.ndim == 2:
        return conv1d(x.reshape(1, *x.shape), k, stride, padding).reshape(k.shape[0], -1)
    if x.ndim != 3 or k.ndim != 3:
        raise DimensionError(f"conv1d expects x (B, C, L) and k (O, C, w); got {x.shape} and {k.shape}")
    B, C, L = x.shape
    O, Ck, w = k.shape
    if C != Ck:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape} vs kernel {k.shape}")
    left, right, Lout = _resolve_padding(L, w, stride, padding)

    xd = x.data
    if left or right:
        xp = np.zeros((B, C, L + left + right), dtype=xd.dtype)
        xp[:, :, left:left + L] = xd
    else:
        xp = xd
    win = sliding_window_view(xp, w, axis=2)[:, :, ::stride][:, :, :Lout]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * Lout, C * w)
    kmat = k.data.reshape(O, C * w)
    y = (cols @ kmat.T).reshape(B, Lout, O).transpose(0, 2, 1)
    y = np.ascontiguousarray(y)
    Lp = xp.shape[2]

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * Lout, O)
        gk = gx = None
        if k.requires_grad:
            gk = (g2.T @ cols).reshape(O, C, w)
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(B, Lout, C, w)
            gxp = np.zeros((B, C, Lp), dtype=xd.dtype)
            span = (Lout - 1) * stride + 1
            for j in range(w):
                gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, left:left + L]
        return gx, gk

    return make_op("conv1d", y, (x, k), bw)


def conv2d(x: Tensor, k: Tensor, stride=1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, same conventions as :func:`conv1d` on both axes."""
    if x.ndim == 3:
        out = conv2d(x.reshape(1, *x.shape), k, stride, padding)
        return out.reshape(out.shape[1:])
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects x (B, C, H, W) and k (O, C, h, w); got {x.shape} and {k.shape}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    B, C, H, W = x.shape
    O, Ck, kh, kw = k.shape
    if C != Ck:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    top, bottom, Hout = _resolve_padding(H, kh, sh, padding)
    left, right, Wout = _resolve_padding(W, kw, sw, padding)

    xd = x.data
    if top or bottom or left or right:
        xp = np.zeros((B, C, H + top + bottom, W + left + right), dtype=xd.dtype)
        xp[:, :, top:top + H, left:left + W] = xd
    else:
        xp = xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Hout, :Wout]
    # (B, C, Hout, Wout, kh, kw) -> (B, Hout, Wout, C, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Hout * Wout, C * kh * kw)
    kmat = k.data.reshape(O, C * kh * kw)
    y = (cols @ kmat.T).reshape(B, Hout, Wout, O).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    Hp, Wp = xp.shape[2], xp.shape[3]

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Hout * Wout, O)
        gk = gx = None
        if k.requires_grad:
            gk = (g2.T @ cols).reshape(O, C, kh, kw)
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(B, Hout, Wout, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=xd.dtype)
            hspan = (Hout - 1) * sh + 1
            wspan = (Wout - 1) * sw + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hspan:sh, j:j + wspan:sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, top:top + H, left:left + W]
        return gx, gk

    return make_op("conv2d", y, (x, k), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, reduce_axes: tuple[int, ...],
               training: bool, running: tuple[np.ndarray, np.ndarray] | None = None,
               eps: float = 1e-5) -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
    """Fused normalization of ``x`` over ``reduce_axes``.

    ``gamma`` and ``beta`` broadcast against ``x``. In training mode batch
    statistics are used and returned (keepdims layout) so the caller can fold
    them into its running averages; in eval mode ``running`` supplies
    ``(mean, var)`` arrays broadcastable to ``x``.
    """
    xd = x.data
    if training:
        n = int(np.prod([xd.shape[i] for i in reduce_axes]))
        if n < 2:
            raise ContractError(f"batch normalization in train mode needs >= 2 values per channel, got {xd.shape}")
        mu = xd.mean(axis=reduce_axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=reduce_axes, keepdims=True)
    else:
        if running is None:
            raise ContractError("eval-mode batch normalization needs running statistics")
        mu = np.asarray(running[0], dtype=xd.dtype)
        var = np.asarray(running[1], dtype=xd.dtype)
        xc = xd - mu
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd
    gd = gamma.data
    y = xhat * gd + beta.data
    m = int(np.prod([xd.shape[i] for i in reduce_axes]))

    def bw(g):
        ggamma = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=reduce_axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=reduce_axes, keepdims=True)
                gx = (invstd / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = _unbroadcast(dxhat * invstd, xd.shape)
        return gx, ggamma, gbeta

    out = make_op("batch_norm", y, (x, gamma, beta), bw)
    if training:
        return out, mu, var
    return out, None, None


def global_avg_pool(x: Tensor, channel_axis: int = 0) -> Tensor:
    """Per-channel mean over every axis after ``channel_axis``."""
    axes = tuple(range(channel_axis + 1, x.ndim))
    if not axes:
        raise DimensionError(f"global_avg_pool needs spatial axes after the channel axis, got {x.shape}")
    if math.prod(x.shape[channel_axis + 1:]) == 0:
        raise DimensionError("global_avg_pool over an empty spatial extent")
    return x.mean(axis=axes)
