"""Central finite-difference check of analytic gradients."""
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from src.autodiff.tensor import Tensor
from src.utils.errors import ArgumentError
from src.utils.seeding import make_rng

# Keeps the cotangent stream apart from inputs the caller drew with the same seed.
_COTANGENT_KEY = 101


@dataclass
class GradCheckReport:
    max_rel_error: List[float] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    # Absolute below unit scale so vanishing gradients compare by difference.
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1.0)
    return float(diff / scale)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() of `fn(*inputs)` against central differences.

    Non-scalar outputs are contracted with a fixed random cotangent so every
    output entry contributes.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ArgumentError("step h must lie in [1e-6, 1e-4]", {"h": h})
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    cotangent = make_rng(seed, _COTANGENT_KEY).standard_normal(out.shape)
    out.backward(cotangent)

    def objective(values: List[np.ndarray]) -> float:
        result = fn(*[Tensor(v) for v in values])
        return float(np.sum(result.data * cotangent))

    report = GradCheckReport(tol=tol)
    for index, tensor in enumerate(tensors):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(arrays[index])
        numeric = np.zeros_like(arrays[index])
        flat = arrays[index].reshape(-1)
        for position in range(flat.size):
            original = flat[position]
            flat[position] = original + h
            upper = objective(arrays)
            flat[position] = original - h
            lower = objective(arrays)
            flat[position] = original
            numeric.reshape(-1)[position] = (upper - lower) / (2 * h)
        report.max_rel_error.append(_relative_error(analytic, numeric))
    return report
