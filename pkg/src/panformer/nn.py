"""Parameter containers: a small module system over :mod:`panformer.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

# truncated normal cut-off in units of sigma
_TRUNC = 2.0


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > _TRUNC
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > _TRUNC
    return out * std


class Module:
    """Base class; parameters and child modules are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        unknown = sorted(set(state) - set(params))
        if unknown:
            raise KeyError(f"unknown parameter names: {unknown}")
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"missing parameter names: {missing}")
        for name, value in state.items():
            params[name].assign(value)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.assign(p.data.astype(dtype))
        return self

    def name_parameters(self) -> None:
        """Stamp each Parameter with its registry path."""
        for name, p in self.named_parameters():
            p.name = name

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Parameter(trunc_normal(rng, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv3x3(Module):
    """3x3 stride-1 same-padded convolution, fan-in scaled uniform init."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(9 * cin)
        self.weight = Parameter(rng.uniform(-bound, bound, (3, 3, cin, cout)))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_3x3(x, self.weight, self.bias)
