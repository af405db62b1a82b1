"""Finite-difference and brute-force oracles shared by the test modules."""

import numpy as np

H = 1e-4


def central_difference(f, arr, index, h=H):
    """d f / d arr[index] by central differences, mutating ``arr`` in place."""
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def max_relative_error(f, arr, analytic, indices=None, h=H):
    """Largest relative error between ``analytic`` and central differences of ``f``."""
    if indices is None:
        indices = list(np.ndindex(arr.shape))
    worst = 0.0
    for idx in indices:
        num = central_difference(f, arr, idx, h)
        worst = max(worst, relative_error(float(analytic[idx]), num))
    return worst


def conv2d_direct(x, w, b):
    """Naive zero-padded same 2-D convolution of one slice: x (C, H, W), w (O, C, 3, 3)."""
    C, H, W = x.shape
    O = w.shape[0]
    kh, kw = w.shape[2:]
    ph, pw = kh // 2, kw // 2
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                acc = b[o]
                for c in range(C):
                    for a in range(kh):
                        for e in range(kw):
                            ii, jj = i + a - ph, j + e - pw
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += w[o, c, a, e] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def brute_dice(pred, truth, label):
    """Triple-loop voxel counter for 2|P&G| / (|P| + |G|)."""
    p = g = both = 0
    nz, ny, nx = truth.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                ip = pred[z, y, x] == label
                ig = truth[z, y, x] == label
                p += ip
                g += ig
                both += ip and ig
    if p + g == 0:
        return 1.0
    return 2.0 * both / (p + g)


def brute_regional_dice(pred, truth, label):
    """Regional dice by visiting every slice and tallying counts per region."""
    rows = [z for z in range(truth.shape[0]) if ((truth[z] == 1) | (truth[z] == 2)).any()]
    if not rows:
        return None, None, None
    lo, hi = rows[0], rows[-1]
    n = hi - lo + 1
    fifth = -(-n // 5)
    tallies = {"base": [0, 0, 0, 0], "middle": [0, 0, 0, 0], "apex": [0, 0, 0, 0]}
    for z in range(lo, hi + 1):
        from_top, from_bottom = hi - z, z - lo
        if from_top < fifth:
            region = "base"
        elif from_bottom < fifth:
            region = "apex"
        else:
            region = "middle"
        t = tallies[region]
        t[3] += 1
        for y in range(truth.shape[1]):
            for x in range(truth.shape[2]):
                ip = pred[z, y, x] == label
                ig = truth[z, y, x] == label
                t[0] += ip
                t[1] += ig
                t[2] += ip and ig
    out = []
    for region in ("base", "middle", "apex"):
        p, g, both, slices = tallies[region]
        if slices == 0:
            out.append(None)
        else:
            out.append(1.0 if p + g == 0 else 2.0 * both / (p + g))
    return tuple(out)
