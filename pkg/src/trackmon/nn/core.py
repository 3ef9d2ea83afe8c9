"""Parameter container and module base for the numpy network kernel."""

from __future__ import annotations

from typing import Iterable

import numpy as np


class Param:
    """A trainable array plus its same-shaped gradient accumulation buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Param(shape={self.value.shape})"


class Module:
    """Base class: named parameter traversal and gradient zeroing.

    Subclasses list their own parameters and sub-modules explicitly, which
    keeps iteration order deterministic (it defines checkpoint layout).
    """

    def named_params(self) -> list[tuple[str, Param]]:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.grad[...] = 0.0

    def param_count(self) -> int:
        return sum(p.value.size for _, p in self.named_params())


def prefixed(prefix: str, module: Module) -> list[tuple[str, Param]]:
    """Re-key a module's parameters under ``prefix.``; used for composition."""
    return [(f"{prefix}.{name}", p) for name, p in module.named_params()]


def check_unique_names(params: Iterable[tuple[str, Param]]) -> dict[str, Param]:
    out: dict[str, Param] = {}
    for name, p in params:
        if name in out:
            raise ValueError(f"duplicate parameter name {name!r}")
        out[name] = p
    return out


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))
