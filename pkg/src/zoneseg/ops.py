"""Differentiable operators needed by the two U-net variants.

All spatial ops take feature maps shaped ``(C, D, H, W)``. Convolutions run as
im2col + one GEMM per depth chunk so the heavy lifting lands in BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_result

# upper bound on im2col floats materialised at once (64 MB in float32)
COL_BUDGET = 1 << 24


@dataclass
class ConvKernel:
    """Weights ``(out_channels, in_channels, kd, kh, kw)`` and a per-output bias."""

    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weights.ndim != 5:
            raise ConfigError(f"kernel weights must be 5-d, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def extent(self) -> Tuple[int, int, int]:
        return tuple(self.weights.shape[2:])

    @property
    def is_2d(self) -> bool:
        return self.weights.shape[2] == 1

    def parameters(self) -> list:
        return [self.weights, self.bias]


def _check_feature_map(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a (C, D, H, W) tensor, got shape {x.shape}")


def _im2col_chunks(xp: np.ndarray, ksize, out_dhw):
    """Yield ``(d0, n, cols)`` with ``cols`` shaped ``(C*kd*kh*kw, n*H*W)``."""
    C = xp.shape[0]
    kd, kh, kw = ksize
    D, H, W = out_dhw
    K = C * kd * kh * kw
    step = max(1, min(D, COL_BUDGET // max(1, K * H * W)))
    for d0 in range(0, D, step):
        n = min(step, D - d0)
        cols = np.empty((C, kd, kh, kw, n, H, W), dtype=xp.dtype)
        for a in range(kd):
            for b in range(kh):
                for e in range(kw):
                    cols[:, a, b, e] = xp[:, d0 + a : d0 + a + n, b : b + H, e : e + W]
        yield d0, n, cols.reshape(K, n * H * W)


def _pad_same(x: np.ndarray, ksize) -> np.ndarray:
    pads = [(0, 0)] + [(k // 2, k // 2) for k in ksize]
    if not any(p for p, _ in pads):
        return x
    return np.pad(x, pads)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    C, D, H, W = x.shape
    O = w.shape[0]
    ksize = w.shape[2:]
    if ksize == (1, 1, 1):
        return (w.reshape(O, C) @ x.reshape(C, -1)).reshape(O, D, H, W)
    wm = w.reshape(O, -1)
    out = np.empty((O, D, H, W), dtype=x.dtype)
    for d0, n, cols in _im2col_chunks(_pad_same(x, ksize), ksize, (D, H, W)):
        out[:, d0 : d0 + n] = (wm @ cols).reshape(O, n, H, W)
    return out


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, ksize) -> np.ndarray:
    C, D, H, W = x.shape
    O = g.shape[0]
    if tuple(ksize) == (1, 1, 1):
        return (g.reshape(O, -1) @ x.reshape(C, -1).T).reshape(O, C, 1, 1, 1)
    gw = np.zeros((O, C * int(np.prod(ksize))), dtype=x.dtype)
    for d0, n, cols in _im2col_chunks(_pad_same(x, ksize), ksize, (D, H, W)):
        gw += g[:, d0 : d0 + n].reshape(O, -1) @ cols.T
    return gw.reshape((O, C) + tuple(ksize))


def conv3d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    A kernel depth of 1 gives an in-plane (2D) convolution applied to every
    slice independently.
    """
    _check_feature_map(x, "conv3d")
    w, b = kernel.weights, kernel.bias
    if kernel.in_channels != x.shape[0]:
        raise ShapeError(f"kernel expects {kernel.in_channels} input channels, input has {x.shape[0]}")
    if any(k % 2 == 0 for k in kernel.extent):
        raise ConfigError(f"kernel extents must be odd for same padding, got {kernel.extent}")
    out = _conv_same(x.data, w.data)
    out += b.data[:, None, None, None]
    ksize = kernel.extent

    def backward_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _conv_same(g, flipped)
        if w.requires_grad:
            gw = _conv_weight_grad(x.data, g, ksize)
        if b.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        return gx, gw, gb

    return make_result(out, (x, w, b), backward_fn)


def maxpool(x: Tensor, window: Sequence[int]) -> Tensor:
    """Max over disjoint windows; gradient goes to the first maximum in scan order."""
    _check_feature_map(x, "maxpool")
    pd, ph, pw = window
    C, D, H, W = x.shape
    for axis, extent, k in zip("DHW", (D, H, W), (pd, ph, pw)):
        if extent % k:
            raise ShapeError(f"maxpool: extent {axis}={extent} not divisible by window {k}")
    Do, Ho, Wo = D // pd, H // ph, W // pw
    blocks = (
        x.data.reshape(C, Do, pd, Ho, ph, Wo, pw)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(C, Do, Ho, Wo, pd * ph * pw)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        gx = (
            routed.reshape(C, Do, Ho, Wo, pd, ph, pw)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(C, D, H, W)
        )
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward_fn)


def upsample_transposed(x: Tensor, factor: Sequence[int], kernel: ConvKernel) -> Tensor:
    """Transposed convolution whose kernel extent equals its stride.

    Each input voxel writes one non-overlapping ``factor`` block per output
    channel, so the op is a single GEMM plus an interleaving reshape.
    """
    _check_feature_map(x, "upsample_transposed")
    factor = tuple(int(f) for f in factor)
    if kernel.extent != factor:
        raise ConfigError(f"upsample kernel extent {kernel.extent} must equal factor {factor}")
    if kernel.in_channels != x.shape[0]:
        raise ShapeError(f"kernel expects {kernel.in_channels} input channels, input has {x.shape[0]}")
    w, b = kernel.weights, kernel.bias
    C, D, H, W = x.shape
    O = kernel.out_channels
    fd, fh, fw = factor
    F = fd * fh * fw
    wm = w.data.transpose(0, 2, 3, 4, 1).reshape(O * F, C)
    y = (wm @ x.data.reshape(C, -1)).reshape(O, fd, fh, fw, D, H, W)
    out = y.transpose(0, 4, 1, 5, 2, 6, 3).reshape(O, D * fd, H * fh, W * fw)
    out += b.data[:, None, None, None]

    def backward_fn(g):
        gm = (
            g.reshape(O, D, fd, H, fh, W, fw)
            .transpose(0, 2, 4, 6, 1, 3, 5)
            .reshape(O * F, D * H * W)
        )
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wm.T @ gm).reshape(C, D, H, W)
        if w.requires_grad:
            gw = (gm @ x.data.reshape(C, -1).T).reshape(O, fd, fh, fw, C).transpose(0, 4, 1, 2, 3)
            gw = np.ascontiguousarray(gw)
        if b.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        return gx, gw, gb

    return make_result(np.ascontiguousarray(out), (x, w, b), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_feature_map(a, "concat_channels")
    _check_feature_map(b, "concat_channels")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial extents differ, {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return make_result(out, (a, b), lambda g: (g[:ca], g[ca:]))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax across axis 0 with per-voxel max subtraction."""
    if logits.shape[0] < 2:
        raise ShapeError("softmax_channels needs at least two channels")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return make_result(s, (logits,), backward_fn)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over the spatial extent of a single volume."""
    _check_feature_map(x, "instance_norm")
    C = x.shape[0]
    flat = x.data.reshape(C, -1)
    n = flat.shape[1]
    mean = flat.mean(axis=1, keepdims=True)
    centered = flat - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = (xhat * gamma.data[:, None] + beta.data[:, None]).reshape(x.shape)

    def backward_fn(g):
        gf = g.reshape(C, -1)
        ggamma = (gf * xhat).sum(axis=1)
        gbeta = gf.sum(axis=1)
        gxhat = gf * gamma.data[:, None]
        gx = inv_std / n * (
            n * gxhat - gxhat.sum(axis=1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
        )
        return gx.reshape(x.shape).astype(x.dtype, copy=False), ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return make_result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(())
    return make_result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
