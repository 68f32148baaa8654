"""Parameter containers, initialisers and the Adam optimiser."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T


class Module:
    """Attribute-walking parameter container.

    Any attribute holding a grad-requiring ``Tensor``, a ``Module`` or a list
    of modules is exposed through ``named_parameters`` in definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, T.Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, T.Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}")

    def parameters(self) -> list[T.Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data) -> T.Tensor:
    return T.Tensor(data, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> T.Tensor:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return param(rng.normal(0.0, std, size=(fan_in, fan_out)))


def zeros(*shape) -> T.Tensor:
    return param(np.zeros(shape))


def ones(*shape) -> T.Tensor:
    return param(np.ones(shape))


class Adam:
    def __init__(self, params: list[T.Tensor], lr: float = 3e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        if self.lr == 0.0:
            return
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"adam.m.{i}"]
            self.v[i][...] = arrays[f"adam.v.{i}"]
