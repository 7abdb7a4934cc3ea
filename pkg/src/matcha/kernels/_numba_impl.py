"""Numba-jitted implementations of the hot kernels.

Loop structure mirrors the numpy reference so both backends agree to
roundoff. fastmath stays off: reductions must be reproducible.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def bilinear_gather(data, xs, ys):
    h, w, c = data.shape
    p = xs.shape[0]
    out = np.empty((p, c), dtype=np.float64)
    for i in range(p):
        x0 = int(np.floor(xs[i]))
        y0 = int(np.floor(ys[i]))
        if x0 < 0:
            x0 = 0
        elif x0 > w - 1:
            x0 = w - 1
        if y0 < 0:
            y0 = 0
        elif y0 > h - 1:
            y0 = h - 1
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = xs[i] - x0
        fy = ys[i] - y0
        w00 = (1.0 - fx) * (1.0 - fy)
        w10 = fx * (1.0 - fy)
        w01 = (1.0 - fx) * fy
        w11 = fx * fy
        for k in range(c):
            out[i, k] = (
                data[y0, x0, k] * w00
                + data[y0, x1, k] * w10
                + data[y1, x0, k] * w01
                + data[y1, x1, k] * w11
            )
    return out


@nb.njit(cache=True)
def bilinear_scatter(grad, xs, ys, h, w):
    p, c = grad.shape
    out = np.zeros((h, w, c), dtype=np.float64)
    for i in range(p):
        x0 = int(np.floor(xs[i]))
        y0 = int(np.floor(ys[i]))
        if x0 < 0:
            x0 = 0
        elif x0 > w - 1:
            x0 = w - 1
        if y0 < 0:
            y0 = 0
        elif y0 > h - 1:
            y0 = h - 1
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = xs[i] - x0
        fy = ys[i] - y0
        w00 = (1.0 - fx) * (1.0 - fy)
        w10 = fx * (1.0 - fy)
        w01 = (1.0 - fx) * fy
        w11 = fx * fy
        for k in range(c):
            g = grad[i, k]
            out[y0, x0, k] += g * w00
            out[y0, x1, k] += g * w10
            out[y1, x0, k] += g * w01
            out[y1, x1, k] += g * w11
    return out


@nb.njit(cache=True)
def _axis_coords(n_in, n_out):
    out = np.empty(n_out, dtype=np.float64)
    if n_out == 1:
        out[0] = (n_in - 1) / 2.0
        return out
    step = (n_in - 1) / (n_out - 1)
    for j in range(n_out):
        out[j] = j * step
    return out


@nb.njit(cache=True)
def bilinear_resize(data, out_h, out_w):
    c = data.shape[2]
    sy = _axis_coords(data.shape[0], out_h)
    sx = _axis_coords(data.shape[1], out_w)
    xs = np.empty(out_h * out_w, dtype=np.float64)
    ys = np.empty(out_h * out_w, dtype=np.float64)
    idx = 0
    for j in range(out_h):
        for i in range(out_w):
            xs[idx] = sx[i]
            ys[idx] = sy[j]
            idx += 1
    flat = bilinear_gather(data, xs, ys)
    return flat.reshape(out_h, out_w, c)


@nb.njit(cache=True)
def sampson_distances(e_mat, pts_a, pts_b):
    n = pts_a.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        ax, ay = pts_a[i, 0], pts_a[i, 1]
        bx, by = pts_b[i, 0], pts_b[i, 1]
        l0 = e_mat[0, 0] * ax + e_mat[0, 1] * ay + e_mat[0, 2]
        l1 = e_mat[1, 0] * ax + e_mat[1, 1] * ay + e_mat[1, 2]
        l2 = e_mat[2, 0] * ax + e_mat[2, 1] * ay + e_mat[2, 2]
        m0 = e_mat[0, 0] * bx + e_mat[1, 0] * by + e_mat[2, 0]
        m1 = e_mat[0, 1] * bx + e_mat[1, 1] * by + e_mat[2, 1]
        num = bx * l0 + by * l1 + l2
        den = l0 * l0 + l1 * l1 + m0 * m0 + m1 * m1
        if den < 1e-300:
            den = 1e-300
        out[i] = abs(num) / np.sqrt(den)
    return out
