"""Parameter containers and initialisers shared by the model pieces."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class ParamStore(OrderedDict):
    """Ordered name -> Tensor mapping; every entry requires grad."""

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {', '.join(sorted(missing))}")
        for name, p in self.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arrays[name].shape} != expected {p.shape}")
        for name, p in self.items():
            p.data = np.array(arrays[name], dtype=np.float64)

    def count(self) -> int:
        return sum(p.data.size for p in self.values())


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape, scale: float = 1.0) -> np.ndarray:
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
