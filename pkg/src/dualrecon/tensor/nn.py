"""Parameters, modules and the small set of layers the network is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import engine as E
from .engine import Tensor


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; a seed gives the same stream on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Parameter(Tensor):
    """A trainable leaf tensor carrying its hierarchical name and Adam moments."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(E.get_default_dtype())


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=E.get_default_dtype())


class Module:
    """Base class; parameters and submodules are discovered from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise E.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(kaiming_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = E.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim, dtype=E.get_default_dtype()))
        self.beta = Parameter(zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return E.layer_norm(x, self.gamma, self.beta)


class Conv(Module):
    """3x3 (2-D) or 3x3x3 (3-D) same-padding convolution, channel-last."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, spatial: int = 2):
        k = (3,) * spatial
        self.weight = Parameter(kaiming_uniform(rng, k + (d_in, d_out), d_in * 3 ** spatial))
        self.bias = Parameter(zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return E.conv(x, self.weight, self.bias)


class ConvTranspose(Module):
    """Stride-2 upsampling transposed convolution, kernel 2."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, spatial: int = 2):
        k = (2,) * spatial
        self.weight = Parameter(kaiming_uniform(rng, k + (d_in, d_out), d_in))
        self.bias = Parameter(zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return E.conv_transpose(x, self.weight, self.bias)


class MLP(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(E.relu(self.fc1(x)))
