"""Named parameter groups with a trainable/frozen flag, plus initializers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor
from .errors import ParameterError


@dataclass
class ParamGroup:
    """An ordered mapping of parameter names to tensors, trained as a unit."""

    name: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True

    def add(self, key: str, tensor: Tensor) -> Tensor:
        if key in self.tensors:
            raise ParameterError(f"duplicate parameter name {key!r} in group {self.name!r}")
        self.tensors[key] = tensor
        return tensor

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def scalar_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        for t in self.tensors.values():
            t.requires_grad = flag

    def copy(self, name: str | None = None, trainable: bool | None = None) -> "ParamGroup":
        g = ParamGroup(name=name if name is not None else self.name,
                       trainable=self.trainable if trainable is None else trainable)
        for key, t in self.tensors.items():
            g.tensors[key] = Tensor(t.data.copy(), requires_grad=g.trainable)
        return g


def count_trainable_params(groups: Iterable[ParamGroup]) -> int:
    """Exact number of scalars across groups flagged trainable."""
    return sum(g.scalar_count() for g in groups if g.trainable)


def init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> Tensor:
    """Fan-in-scaled uniform kernel init."""
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    return Tensor(w.astype(DEFAULT_DTYPE), requires_grad=True)


def init_bias(rng: np.random.Generator, c_out: int, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    b = rng.uniform(-bound, bound, size=(c_out, 1, 1))
    return Tensor(b.astype(DEFAULT_DTYPE), requires_grad=True)
