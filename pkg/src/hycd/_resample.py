"""Bilinear sampling, box downsampling and centre-aligned upsampling."""

import numpy as np


def bilinear_sample(plane, xs, ys, clamp=False):
    """Sample ``plane`` (H, W) at float coordinates.

    Returns ``(values, inside)``. With ``clamp=True`` coordinates are clamped
    to the image and ``inside`` is all True. Otherwise samples with a
    coordinate outside ``[0, W-1] x [0, H-1]`` get value 0 and inside=False.
    Integer coordinates reproduce the source exactly.
    """
    h, w = plane.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if clamp:
        inside = np.ones(xs.shape, dtype=bool)
        xs = np.clip(xs, 0, w - 1)
        ys = np.clip(ys, 0, h - 1)
    else:
        inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
        xs = np.where(inside, xs, 0.0)
        ys = np.where(inside, ys, 0.0)

    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    p = np.asarray(plane, dtype=np.float64)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bottom = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out[~inside] = 0.0
    return out, inside


def box_downsample(plane):
    """2x2 mean; an odd trailing row/column is dropped."""
    h, w = plane.shape[-2:]
    h2, w2 = h // 2, w // 2
    p = plane[..., : 2 * h2, : 2 * w2]
    return 0.25 * (p[..., 0::2, 0::2] + p[..., 1::2, 0::2] + p[..., 0::2, 1::2] + p[..., 1::2, 1::2])


def upsample_bilinear(arr, out_shape):
    """Resize the trailing two axes of ``arr`` to ``out_shape``.

    Pixel centres are aligned: fine pixel x maps to coarse coordinate
    ``(x + 0.5) * w_in / w_out - 0.5``, clamped to the coarse grid.
    """
    arr = np.asarray(arr)
    h_in, w_in = arr.shape[-2:]
    h_out, w_out = out_shape
    if (h_in, w_in) == (h_out, w_out):
        return arr.copy()

    def axis_weights(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    y0, y1, fy = axis_weights(h_in, h_out)
    x0, x1, fx = axis_weights(w_in, w_out)
    rows = arr[..., y0, :] * (1 - fy)[:, None] + arr[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx
