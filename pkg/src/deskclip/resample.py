"""Bilinear grid resampling shared by positional-table interpolation and crops."""

from __future__ import annotations

import numpy as np


def _coords(n_in: int, n_out: int) -> np.ndarray:
    # endpoint-aligned sampling: identity when n_in == n_out
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample the last two axes of ``arr`` to (out_h, out_w)."""
    h, w = arr.shape[-2:]
    ys = _coords(h, out_h)
    xs = _coords(w, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)

    src = arr.astype(np.float64, copy=False)
    tl = src[..., y0[:, None], x0[None, :]]
    tr = src[..., y0[:, None], x1[None, :]]
    bl = src[..., y1[:, None], x0[None, :]]
    br = src[..., y1[:, None], x1[None, :]]
    top = tl * (1.0 - wx) + tr * wx
    bot = bl * (1.0 - wx) + br * wx
    out = top * (1.0 - wy) + bot * wy
    return out.astype(arr.dtype, copy=False)
