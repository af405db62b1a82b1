"""Point samplers on ``(z, y, x)`` voxel grids, indices at voxel centres."""

from __future__ import annotations

import numpy as np


def linear_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """1-D linear interpolation along ``axis`` with clamp-to-edge."""
    n = arr.shape[axis]
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    f = c - i0
    shape = [1] * arr.ndim
    shape[axis] = -1
    f = f.reshape(shape)
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    return a0 * (1.0 - f) + a1 * f


def nearest_index(coords: np.ndarray, n: int) -> np.ndarray:
    return np.clip(np.floor(np.asarray(coords, dtype=np.float64) + 0.5), 0, n - 1).astype(np.intp)


def trilinear(vol: np.ndarray, z: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sample ``vol`` at arbitrary points; out-of-field points clamp to the edge."""
    nz, ny, nx = vol.shape
    z = np.clip(z, 0.0, nz - 1)
    y = np.clip(y, 0.0, ny - 1)
    x = np.clip(x, 0.0, nx - 1)
    z0 = np.floor(z).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    z1 = np.minimum(z0 + 1, nz - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    fz, fy, fx = z - z0, y - y0, x - x0
    v = vol.astype(np.float64, copy=False)
    c00 = v[z0, y0, x0] * (1 - fx) + v[z0, y0, x1] * fx
    c01 = v[z0, y1, x0] * (1 - fx) + v[z0, y1, x1] * fx
    c10 = v[z1, y0, x0] * (1 - fx) + v[z1, y0, x1] * fx
    c11 = v[z1, y1, x0] * (1 - fx) + v[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def nearest(vol: np.ndarray, z: np.ndarray, y: np.ndarray, x: np.ndarray, fill=0) -> np.ndarray:
    """Nearest-voxel lookup; points rounding outside the grid take ``fill``."""
    idx = [np.floor(np.asarray(c, dtype=np.float64) + 0.5).astype(np.intp) for c in (z, y, x)]
    inside = np.ones(idx[0].shape, dtype=bool)
    for i, n in zip(idx, vol.shape):
        inside &= (i >= 0) & (i < n)
    clipped = [np.clip(i, 0, n - 1) for i, n in zip(idx, vol.shape)]
    out = vol[tuple(clipped)]
    return np.where(inside, out, np.asarray(fill, dtype=vol.dtype))
