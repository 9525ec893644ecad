"""Parameter containers and initialization shared by the model components."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, parameter


def init_uniform(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape).astype(np.float32), name=name)


def init_zeros(shape, name: str | None = None) -> Tensor:
    return parameter(np.zeros(shape, dtype=np.float32), name=name)


class Module:
    """Collects parameters from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def bias_param(enabled: bool, rng: np.random.Generator, size: int, fan_in: int) -> Tensor | None:
    return init_uniform(rng, (size,), fan_in) if enabled else None
