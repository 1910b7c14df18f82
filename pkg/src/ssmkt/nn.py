"""Parameter containers, initialisers and the seeded generator."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """PCG64 generator; children come from ``SeedSequence.spawn`` so streams never overlap."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.PCG64(ss))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    return [make_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def parameter(data, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def uniform_fan_in(rng, shape, fan_in, dtype=np.float64) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), dtype)


def normal(rng, shape, std=0.02, dtype=np.float64) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape), dtype)


class Module:
    """Attribute-walking parameter registry, in definition order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"load {name}", p.shape, arr.shape)
            p.data = arr.astype(p.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, dtype=np.float64):
        self.weight = uniform_fan_in(rng, (d_in, d_out), d_in, dtype)
        self.bias = uniform_fan_in(rng, (d_out,), d_in, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def step(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.data
        return y + self.bias.data if self.bias is not None else y
