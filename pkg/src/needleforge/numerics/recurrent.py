"""Fused gated-recurrent state update.

One op per timestep keeps the recurrent inner loop cheap: the hidden-path
convolutions, both gates, the candidate and the convex state update are
evaluated together. The state is laid out spatial-major, ``(L, B, C)``, so a
kernel tap at offset ``s`` is a contiguous shift by ``s*B`` rows of the
flattened ``(L*B, C)`` matrix; stacking the shifted copies side by side
turns each hidden-path convolution into a single GEMM. A dense GRU is
the special case ``L = 1, width = 1``.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, make_op


def kernel_taps(k: Tensor) -> Tensor:
    """(O, C, w) conv kernel -> (w, C, O) stack of per-tap matrices."""
    return k.transpose(2, 1, 0)


def _tap_ranges(L: int, B: int, width: int):
    left = (width - 1) // 2
    for j in range(width):
        s = j - left
        lo, hi = max(0, -s), L - max(0, s)
        if hi > lo:
            # output rows [lo, hi) read input rows [lo + s, hi + s)
            yield j, lo * B, hi * B, (lo + s) * B, (hi + s) * B


def _columns(x: np.ndarray, L: int, B: int, width: int) -> np.ndarray:
    """(L*B, C) -> (L*B, width*C) im2col; taps falling off the sequence read zeros."""
    if width == 1:
        return x
    n, C = x.shape
    cols = np.zeros((n, width, C), dtype=x.dtype)
    for j, o0, o1, i0, i1 in _tap_ranges(L, B, width):
        cols[o0:o1, j] = x[i0:i1]
    return cols.reshape(n, width * C)


def _fold_columns(gcols: np.ndarray, L: int, B: int, width: int) -> np.ndarray:
    """Adjoint of :func:`_columns`."""
    if width == 1:
        return gcols
    n = gcols.shape[0]
    g = gcols.reshape(n, width, -1)
    gx = np.zeros((n, g.shape[2]), dtype=gcols.dtype)
    for j, o0, o1, i0, i1 in _tap_ranges(L, B, width):
        gx[i0:i1] += g[o0:o1, j]
    return gx


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def gated_update(gx: Tensor, h: Tensor, k_zr: Tensor, k_c: Tensor) -> Tensor:
    """One GRU-style step on an (L, B, C) state.

    ``gx`` (L, B, 3C) holds the precomputed input-path pre-activations (bias
    included) for the z, r and candidate gates; ``k_zr`` (w, C, 2C) and
    ``k_c`` (w, C, C) are the hidden-path kernels from :func:`kernel_taps`.

        z, r = sigmoid(K_zr * h + gx_zr)
        c    = tanh(K_c * (r . h) + gx_c)
        h'   = z . c + (1 - z) . h
    """
    hd = h.data
    L, B, C = hd.shape
    if gx.shape != (L, B, 3 * C):
        raise DimensionError(f"gate input {gx.shape} does not match hidden state {hd.shape}")
    width = k_zr.shape[0]
    if k_zr.shape != (width, C, 2 * C) or k_c.shape != (width, C, C):
        raise DimensionError(f"hidden kernels {k_zr.shape}/{k_c.shape} do not match C={C}")
    n = L * B
    g = gx.data.reshape(n, 3 * C)
    kzr, kc = np.ascontiguousarray(k_zr.data), np.ascontiguousarray(k_c.data)
    hf = hd.reshape(n, C)

    wzr, wc = kzr.reshape(width * C, 2 * C), kc.reshape(width * C, C)
    h_cols = _columns(hf, L, B, width)
    zr = _sigmoid(h_cols @ wzr + g[:, :2 * C])
    z = zr[:, :C]
    r = zr[:, C:]
    rh = r * hf
    rh_cols = _columns(rh, L, B, width)
    c = np.tanh(rh_cols @ wc + g[:, 2 * C:])
    out = (hf + z * (c - hf)).reshape(L, B, C)

    def bw(gh):
        gh = gh.reshape(n, C)
        dz = gh * (c - hf)
        dc = gh * z
        dh = gh - dc
        da = np.empty((n, 3 * C), dtype=hf.dtype)
        da[:, 2 * C:] = dc * (1.0 - c * c)
        dc_pre = da[:, 2 * C:]
        dk_c = (rh_cols.T @ dc_pre).reshape(kc.shape)
        drh = _fold_columns(dc_pre @ wc.T, L, B, width)
        dh += drh * r
        da[:, :C] = dz * z * (1.0 - z)
        da[:, C:2 * C] = (drh * hf) * r * (1.0 - r)
        dzr_pre = da[:, :2 * C]
        dk_zr = (h_cols.T @ dzr_pre).reshape(kzr.shape)
        if h.requires_grad:
            dh += _fold_columns(dzr_pre @ wzr.T, L, B, width)
        return (da.reshape(L, B, 3 * C), dh.reshape(L, B, C) if h.requires_grad else None,
                dk_zr if k_zr.requires_grad else None, dk_c if k_c.requires_grad else None)

    return make_op("gated_update", out, (gx, h, k_zr, k_c), bw)


def _sequence_columns(xd: np.ndarray, L: int, B: int, width: int) -> np.ndarray:
    """(T, L*B, C) -> (T, L*B, width*C) im2col with zero rows outside the sequence."""
    T, n, C = xd.shape
    cols = np.zeros((T, n, width, C), dtype=xd.dtype)
    for j, o0, o1, i0, i1 in _tap_ranges(L, B, width):
        cols[:, o0:o1, j] = xd[:, i0:i1]
    return cols.reshape(T, n, width * C)


def sequence_tap_conv(x: Tensor, k: Tensor) -> Tensor:
    """"Same" conv of a (T, L, B, C_in) sequence with an (O, C_in, w) kernel -> (T, L, B, O)."""
    T, L, B, Cin = x.shape
    O, Ck, width = k.shape
    if Ck != Cin:
        raise DimensionError(f"sequence conv channel mismatch: input {x.shape} vs kernel {k.shape}")
    n = L * B
    cols = _sequence_columns(x.data.reshape(T, n, Cin), L, B, width)
    w2 = np.ascontiguousarray(k.data.transpose(2, 1, 0)).reshape(width * Cin, O)
    y = cols @ w2

    def bw(g):
        g = g.reshape(T * n, O)
        gk = None
        if k.requires_grad:
            gw = cols.reshape(T * n, width * Cin).T @ g
            gk = np.ascontiguousarray(gw.reshape(width, Cin, O).transpose(2, 1, 0))
        gx = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(T, n, width, Cin)
            gx = np.zeros((T, n, Cin), dtype=g.dtype)
            for j, o0, o1, i0, i1 in _tap_ranges(L, B, width):
                gx[:, i0:i1] += gcols[:, o0:o1, j]
            gx = gx.reshape(T, L, B, Cin)
        return gx, gk

    return make_op("sequence_tap_conv", y.reshape(T, L, B, O), (x, k), bw)
