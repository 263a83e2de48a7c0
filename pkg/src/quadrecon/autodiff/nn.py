"""Parameter containers for small dense networks."""

from typing import Dict, Iterator, List, Tuple

import numpy as np

from quadrecon.autodiff.tensor import Tensor
from quadrecon.autodiff import ops


class Module:
    """Base class: parameters are Tensor attributes, children are Module attributes or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(name)
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data[...] = state[name]


class Linear(Module):
    """``y = x @ W + b`` with fan-in scaled normal init and zero bias."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 2.0, zero: bool = False):
        std = 0.0 if zero else float(np.sqrt(gain / fan_in))
        self.weight = Tensor(rng.normal(0.0, 1.0, (fan_in, fan_out)) * std, requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Stack of Linear layers with a shared hidden activation and no output activation."""

    def __init__(self, sizes: List[int], rng: np.random.Generator, activation=ops.relu, zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self._activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._activation(x)
        return x
