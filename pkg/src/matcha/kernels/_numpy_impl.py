"""Pure-numpy reference implementations of the hot kernels.

These are the fallback path when numba is unavailable or disabled via
MATCHA_BACKEND=numpy. The numba implementations must agree with these
to floating-point roundoff.
"""

import numpy as np


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned source coordinates for resampling one axis."""
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def bilinear_gather(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) data at continuous grid coords; returns (P, C).

    Coordinates are assumed in-range ([0, W-1] x [0, H-1]); callers validate.
    """
    h, w, _ = data.shape
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    return (
        data[y0, x0] * (1.0 - fx) * (1.0 - fy)
        + data[y0, x1] * fx * (1.0 - fy)
        + data[y1, x0] * (1.0 - fx) * fy
        + data[y1, x1] * fx * fy
    )


def bilinear_scatter(grad: np.ndarray, xs: np.ndarray, ys: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of bilinear_gather: distribute (P, C) grads onto an (H, W, C) grid."""
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    out = np.zeros((h, w, grad.shape[1]), dtype=np.float64)
    np.add.at(out, (y0, x0), grad * (1.0 - fx) * (1.0 - fy))
    np.add.at(out, (y0, x1), grad * fx * (1.0 - fy))
    np.add.at(out, (y1, x0), grad * (1.0 - fx) * fy)
    np.add.at(out, (y1, x1), grad * fx * fy)
    return out


def bilinear_resize(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an (H, W, C) grid."""
    sy = _axis_coords(data.shape[0], out_h)
    sx = _axis_coords(data.shape[1], out_w)
    xs = np.tile(sx, out_h)
    ys = np.repeat(sy, out_w)
    return bilinear_gather(data, xs, ys).reshape(out_h, out_w, data.shape[2])


def sampson_distances(e_mat: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """First-order (Sampson) point-to-model distances in normalized coords.

    pts_a, pts_b: (N, 2) normalized image coordinates. Returns (N,) distances.
    """
    n = pts_a.shape[0]
    ones = np.ones((n, 1), dtype=np.float64)
    xa = np.hstack([pts_a, ones])
    xb = np.hstack([pts_b, ones])
    ex1 = xa @ e_mat.T          # rows are E @ x_a
    etx2 = xb @ e_mat           # rows are E^T @ x_b
    num = np.sum(xb * ex1, axis=1)
    den = ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))
