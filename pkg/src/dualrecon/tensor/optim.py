"""Adam with bias correction, operating in place on :class:`Parameter` objects."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .nn import Parameter


class MissingGradientError(RuntimeError):
    pass


def grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    norm = grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.dtype.type(scale)
    return norm


def adam_step(params: Iterable[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update for every parameter; gradients are cleared afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradientError(f"parameter {p.name or '<unnamed>'} has no gradient")
    b1, b2 = betas
    for p in params:
        g = p.grad
        p.step += 1
        p.m = b1 * p.m + (1 - b1) * g
        p.v = b2 * p.v + (1 - b2) * g * g
        mhat = p.m / (1 - b1 ** p.step)
        vhat = p.v / (1 - b2 ** p.step)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)
        p.grad = None
