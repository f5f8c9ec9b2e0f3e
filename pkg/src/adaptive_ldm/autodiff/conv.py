"""Raw numpy kernels for 3D convolution and nearest upsampling.

Stride-1 convolutions run on a flattened padded grid: every kernel offset
becomes a constant shift of the flat index, so each tap is a plain GEMM over
a contiguous slice with no im2col copy. Outputs land on the padded grid and
the invalid border is cropped afterwards. Strided convolutions use a
conventional im2col over output positions, which is small for stride 2.
Tiny extents also go through im2col, since there the padded grid is mostly
border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _shift_matmul(taps: np.ndarray, src: np.ndarray, shifts: list[int], length: int) -> np.ndarray:
    """out[:, q] = sum_i taps[i] @ src[:, q + shifts[i]] for q < length.

    ``taps`` is (n_taps, c_out, c_in), ``src`` is (c_in, >= length + max(shifts)).
    Picks the cheapest of three equivalent evaluation orders.
    """
    n_taps, c_out, c_in = taps.shape
    dtype = np.result_type(taps, src)
    if n_taps == 1:
        return taps[0] @ src[:, shifts[0] : shifts[0] + length]
    if c_in <= 4:
        col = np.empty((n_taps, c_in, length), dtype=dtype)
        for i, s in enumerate(shifts):
            col[i] = src[:, s : s + length]
        flat_taps = taps.transpose(1, 0, 2).reshape(c_out, n_taps * c_in)
        return flat_taps @ col.reshape(n_taps * c_in, length)
    if c_out <= 4 and c_in >= 4 * c_out:
        span = length + max(shifts)
        partial = taps.reshape(n_taps * c_out, c_in) @ src[:, :span]
        partial = partial.reshape(n_taps, c_out, span)
        out = partial[0, :, shifts[0] : shifts[0] + length].copy()
        for i in range(1, n_taps):
            s = shifts[i]
            out += partial[i, :, s : s + length]
        return out
    out = taps[0] @ src[:, shifts[0] : shifts[0] + length]
    tmp = np.empty_like(out)
    for i in range(1, n_taps):
        s = shifts[i]
        np.matmul(taps[i], src[:, s : s + length], out=tmp)
        out += tmp
    return out


@dataclass
class ConvCtx:
    x_shape: tuple
    w_shape: tuple
    stride: int
    pad: int
    saved: object  # flat padded input (grid mode) or im2col matrix
    grid: bool = True


def _pad_channels_first(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, d, h, w = x.shape
    xp = np.zeros((c, n, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + d, pad : pad + h, pad : pad + w] = x.transpose(1, 0, 2, 3, 4)
    return xp


def _grid_offsets(k: int, hp: int, wp: int) -> list[int]:
    return [(a * hp + b) * wp + c for a in range(k) for b in range(k) for c in range(k)]


def _use_grid(stride: int, pad: int, spatial) -> bool:
    if stride != 1:
        return False
    padded = np.prod([s + 2 * pad for s in spatial])
    return padded <= 2.5 * np.prod(spatial)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, pad: int):
    n, c_in, d, h, wd = x.shape
    c_out, c_in_w, k = w.shape[0], w.shape[1], w.shape[2]
    if c_in != c_in_w:
        raise ValueError(
            f"conv3d channel mismatch: input has {c_in} channels, weight expects {c_in_w} "
            f"(input {x.shape}, weight {w.shape})"
        )
    if w.shape[2:] != (k, k, k):
        raise ValueError(f"conv3d expects a cubic kernel, got weight {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv3d needs stride >= 1 and pad >= 0 (stride={stride}, pad={pad})")
    if min(d, h, wd) + 2 * pad < k:
        raise ValueError(f"conv3d kernel {k} exceeds padded extent of input {x.shape} with pad {pad}")
    do, ho, wo = (conv_output_size(s, k, stride, pad) for s in (d, h, wd))

    grid_mode = _use_grid(stride, pad, (d, h, wd))
    if grid_mode:
        xp = _pad_channels_first(x, pad)
        _, _, dp, hp, wp = xp.shape
        flat = xp.reshape(c_in, -1)
        shifts = _grid_offsets(k, hp, wp)
        length = flat.shape[1] - shifts[-1]
        taps = np.ascontiguousarray(w.reshape(c_out, c_in, k**3).transpose(2, 0, 1))
        grid = np.zeros((c_out, flat.shape[1]), dtype=x.dtype)
        grid[:, :length] = _shift_matmul(taps, flat, shifts, length)
        out = grid.reshape(c_out, n, dp, hp, wp)[:, :, :do, :ho, :wo].transpose(1, 0, 2, 3, 4)
        out = np.ascontiguousarray(out)
        saved = flat
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
        win = win[:, :, ::stride, ::stride, ::stride][:, :, :do, :ho, :wo]
        # rows: (n, do, ho, wo); columns: (c_in, ka, kb, kc)
        col = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n * do * ho * wo, -1)
        out = col @ w.reshape(c_out, -1).T
        out = np.ascontiguousarray(out.reshape(n, do, ho, wo, c_out).transpose(0, 4, 1, 2, 3))
        saved = col
    if b is not None:
        out += b.reshape(1, c_out, 1, 1, 1)
    return out, ConvCtx(x.shape, w.shape, stride, pad, saved, grid_mode)


def conv3d_backward(g: np.ndarray, w: np.ndarray, ctx: ConvCtx, need_x: bool = True, need_w: bool = True):
    n, c_in, d, h, wd = ctx.x_shape
    c_out, _, k = ctx.w_shape[:3]
    stride, pad = ctx.stride, ctx.pad
    _, _, do, ho, wo = g.shape
    gb = g.sum(axis=(0, 2, 3, 4))
    gx = gw = None

    if ctx.grid:
        dp, hp, wp = d + 2 * pad, h + 2 * pad, wd + 2 * pad
        shifts = _grid_offsets(k, hp, wp)
        span = n * dp * hp * wp
        length = span - shifts[-1]
        flat = ctx.saved
        # cotangent laid out on the padded grid, zero on invalid positions
        g_grid = np.zeros((c_out, n, dp, hp, wp), dtype=g.dtype)
        g_grid[:, :, :do, :ho, :wo] = g.transpose(1, 0, 2, 3, 4)
        g_grid = g_grid.reshape(c_out, span)
        if need_w:
            gw_taps = np.empty((k**3, c_out, c_in), dtype=g.dtype)
            g_valid = g_grid[:, :length]
            for i, s in enumerate(shifts):
                np.matmul(g_valid, flat[:, s : s + length].T, out=gw_taps[i])
            gw = gw_taps.transpose(1, 2, 0).reshape(ctx.w_shape)
        if need_x:
            # input cotangent is a correlation of the cotangent with flipped shifts
            top = shifts[-1]
            g_ext = np.zeros((c_out, span + top), dtype=g.dtype)
            g_ext[:, top:] = g_grid
            taps_t = np.ascontiguousarray(w.reshape(c_out, c_in, k**3).transpose(2, 1, 0))
            gxp = _shift_matmul(taps_t, g_ext, [top - s for s in shifts], span)
            gxp = gxp.reshape(c_in, n, dp, hp, wp)[:, :, pad : pad + d, pad : pad + h, pad : pad + wd]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3, 4))
    else:
        col = ctx.saved
        g_rows = g.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
        if need_w:
            gw = (g_rows.T @ col).reshape(ctx.w_shape)
        if need_x:
            gcol = (g_rows @ w.reshape(c_out, -1)).reshape(n, do, ho, wo, c_in, k, k, k)
            gxp = np.zeros((n, c_in, d + 2 * pad, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            span_d, span_h, span_w = stride * (do - 1) + 1, stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        gxp[:, :, a : a + span_d : stride, bb : bb + span_h : stride, c : c + span_w : stride] += (
                            gcol[..., a, bb, c].transpose(0, 4, 1, 2, 3)
                        )
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + d, pad : pad + h, pad : pad + wd])
    return gx, gw, gb


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, pad: int) -> np.ndarray:
    """Direct sliding-window evaluation, used as an independent oracle."""
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    out = np.einsum("ncdhwijk,ocijk->nodhw", win, w)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1, 1)
    return out


def upsample_nearest_forward(x: np.ndarray, factor: int = 2) -> np.ndarray:
    n, c, d, h, w = x.shape
    f = factor
    out = np.broadcast_to(x[:, :, :, None, :, None, :, None], (n, c, d, f, h, f, w, f))
    return out.reshape(n, c, d * f, h * f, w * f)


def upsample_nearest_backward(g: np.ndarray, factor: int = 2) -> np.ndarray:
    n, c, d, h, w = g.shape
    f = factor
    return g.reshape(n, c, d // f, f, h // f, f, w // f, f).sum(axis=(3, 5, 7))
