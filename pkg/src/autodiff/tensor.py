"""Reverse-mode differentiable tensor."""
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import NumericalError, ShapeError


class Tensor:
    """Array value with an optional gradient and the op that produced it."""

    def __init__(self, data, requires_grad: bool = False, ctx: Optional["Function"] = None, name: str = ""):
        array = np.asarray(data)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.ctx = ctx
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients to every tensor that requires them.

        Nodes are visited in reverse topological order and each parent's
        gradient is accumulated in the order the parents were recorded, so
        repeated calls reduce in the same sequence.
        """
        if not self.requires_grad:
            raise ShapeError("backward called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("implicit gradient only for scalar outputs", {"shape": list(self.shape)})
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError("gradient shape mismatch", {"expected": list(self.shape), "got": list(grad.shape)})

        order = _toposort(self)
        grads = {id(self): grad}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node.ctx is None:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node.ctx.backward(node_grad)
            for parent, parent_grad in zip(node.ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def _toposort(root: Tensor) -> List[Tensor]:
    """Iterative post-order over the recorded graph."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.ctx is not None:
            for parent in reversed(node.ctx.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


class Function:
    """One differentiable op; subclasses implement forward and backward."""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = cls(*tensors)
        out = ctx.forward(*[t.data for t in tensors], **kwargs)
        out = np.asarray(out)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"{cls.__name__} produced non-finite values", {"op": cls.__name__})
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, ctx=ctx if requires_grad else None)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
