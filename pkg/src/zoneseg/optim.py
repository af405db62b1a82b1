"""Glorot-uniform initialisation and a bias-corrected Adam optimiser with L2."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Tensor


def glorot_bound(shape: Sequence[int]) -> float:
    fan_in, fan_out = _fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


def _fans(shape):
    if len(shape) < 2:
        raise ConfigError(f"glorot init needs (out, in, ...) shape, got {tuple(shape)}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    if fan_in <= 0 or fan_out <= 0:
        raise ConfigError(f"zero fan for shape {tuple(shape)}")
    return fan_in, fan_out


def glorot_uniform_init(shape: Sequence[int], seed, dtype=np.float32) -> np.ndarray:
    """I.i.d. draws on ``[-b, b]`` with ``b = sqrt(6 / (fan_in + fan_out))``.

    ``seed`` may be anything :func:`numpy.random.default_rng` accepts. Samples
    are drawn in float64 and cast, so both precisions see the same values up
    to rounding.
    """
    bound = glorot_bound(shape)
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("Adam epsilon must be positive")


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    l2_lambda: float = 0.0,
    decay_mask: Sequence[bool] = None,
) -> AdamState:
    """Apply one in-place Adam update.

    The L2 penalty ``l2_lambda * ||w||^2`` is folded into the gradient of every
    parameter whose ``decay_mask`` entry is true (kernel weights; biases and
    normalisation parameters are exempt). With no mask, parameters with more
    than one axis are decayed.
    """
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} parameters but {len(grads)} gradients")
    if decay_mask is None:
        decay_mask = [p.ndim > 1 for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for index, (p, g, decay) in enumerate(zip(params, grads, decay_mask)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if decay and l2_lambda:
            g = g + (2.0 * l2_lambda) * p.data
        m = state.first_moment.get(index)
        if m is None:
            m = state.first_moment[index] = np.zeros_like(p.data)
            state.second_moment[index] = np.zeros_like(p.data)
        v = state.second_moment[index]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        p.data -= update.astype(p.dtype, copy=False)
    return state


class Adam:
    """Stateful wrapper that pulls gradients from ``param.grad``."""

    def __init__(self, params, lr=1e-5, l2_lambda=1e-5, beta1=0.9, beta2=0.999, epsilon=1e-8, decay_mask=None):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.l2_lambda = l2_lambda
        self.decay_mask = decay_mask
        self.state = AdamState(beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.l2_lambda, self.decay_mask)
