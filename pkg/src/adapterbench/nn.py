"""Parameters, a small module tree, and the two layers everything is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    """A named leaf tensor that is either learnable or frozen."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.requires_grad = not value
        if value:
            self.grad = None

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "learnable"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


def uniform_init(rng: np.random.Generator | None, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    ``rng=None`` builds a shape-only model: the buffer is zero-filled by the
    allocator and never touched, which keeps full-scale parameter counting cheap.
    """
    if rng is None:
        return np.zeros(shape)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container whose parameters are discovered from its attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def rename_parameters(self, prefix: str = "") -> None:
        """Stamp every parameter's ``name`` with its path in this tree."""
        for path, p in self.named_parameters(prefix):
            p.name = path

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = uniform_init(rng, (d_in, d_out), d_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ag.ShapeError(f"linear expects width {self.d_in}, got {x.shape}")
        y = ag.matmul(x, self.weight)
        if self.bias is not None:
            y = ag.add_bias(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.scale = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.scale, self.bias, self._eps)


ACTIVATIONS = {
    "relu": ag.relu,
    "gelu": ag.gelu,
    "identity": ag.identity,
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}")
