"""Parameter storage, the Adam optimizer and learning-rate schedules."""
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from src.autodiff.tensor import Tensor
from src.utils.errors import ArgumentError, ShapeError, StateError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Named trainable tensors plus their Adam moments and step counter."""

    def __init__(self, dtype: str = "float64"):
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Tensor] = {}
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise StateError(f"duplicate parameter name '{name}'", {"name": name})
        tensor = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = tensor
        self.first_moment[name] = np.zeros_like(tensor.data)
        self.second_moment[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError as error:
            raise StateError(f"unknown parameter '{name}'", {"name": name}) from error

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def detached(self) -> Dict[str, Tensor]:
        """Constant views of the parameters for forward-only passes."""
        return {name: Tensor(tensor.data) for name, tensor in self._params.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        if set(arrays) != set(self._params):
            raise StateError(
                "parameter names do not match",
                {"expected": sorted(self._params), "got": sorted(arrays)},
            )
        for name, value in arrays.items():
            tensor = self._params[name]
            if value.shape != tensor.shape:
                raise ShapeError(
                    f"parameter '{name}' shape mismatch",
                    {"expected": list(tensor.shape), "got": list(value.shape)},
                )
            tensor.data = np.array(value, dtype=self.dtype)

    def copy(self) -> "ParamStore":
        clone = ParamStore(self.dtype.name)
        for name, tensor in self._params.items():
            clone.add(name, tensor.data.copy())
            clone.first_moment[name] = self.first_moment[name].copy()
            clone.second_moment[name] = self.second_moment[name].copy()
        clone.step = self.step
        return clone


def count_parameters(store: ParamStore) -> int:
    return int(sum(tensor.data.size for _, tensor in store.items()))


def adam_step(store: ParamStore, lr: float) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for name, tensor in store.items():
        if tensor.grad is None:
            raise StateError(f"parameter '{name}' has no gradient", {"name": name})
    t = store.step + 1
    correction1 = 1.0 - ADAM_BETA1 ** t
    correction2 = 1.0 - ADAM_BETA2 ** t
    for name, tensor in store.items():
        grad = tensor.grad.astype(store.dtype, copy=False)
        m = store.first_moment[name]
        v = store.second_moment[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = (tensor.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(store.dtype, copy=False)
        tensor.grad = np.zeros_like(tensor.data)
    store.step = t


@dataclass(frozen=True)
class CyclicalLrSchedule:
    """Triangular cyclical learning rate between lr_min and lr_max."""

    lr_min: float = 1e-4
    lr_max: float = 1e-1
    cycle_steps: int = 2000

    def __post_init__(self):
        if not 0 < self.lr_min < self.lr_max:
            raise ArgumentError(
                "cyclical schedule needs 0 < lr_min < lr_max",
                {"lr_min": self.lr_min, "lr_max": self.lr_max},
            )
        if self.cycle_steps < 2:
            raise ArgumentError("cycle_steps must be at least 2", {"cycle_steps": self.cycle_steps})

    def lr_at(self, step: int) -> float:
        half = self.cycle_steps / 2.0
        cycle = math.floor(1 + step / (2 * half))
        x = abs(step / half - 2 * cycle + 1)
        return self.lr_min + (self.lr_max - self.lr_min) * max(0.0, 1.0 - x)


@dataclass(frozen=True)
class ConstantLrSchedule:
    lr: float = 1e-3

    def lr_at(self, step: int) -> float:
        return self.lr


Schedule = Union[CyclicalLrSchedule, ConstantLrSchedule]


def lr_at(schedule: Schedule, step: int) -> float:
    if step < 0:
        raise ArgumentError("step must be non-negative", {"step": step})
    return schedule.lr_at(step)
