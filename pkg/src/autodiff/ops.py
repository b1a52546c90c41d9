"""Differentiable operators for the encoder, the GCN and the assignment head.

Each op is a `Function` with an analytic backward; the lower-case wrappers at
the bottom are the public API.
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from src.autodiff.tensor import Function, Tensor, as_tensor
from src.utils.errors import ArgumentError, ShapeError


def _require(condition: bool, message: str, **details) -> None:
    if not condition:
        raise ShapeError(message, details)


class MatMul(Function):
    def forward(self, a, b):
        _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0],
                 "matmul shape mismatch", left=list(a.shape), right=list(b.shape))
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class SparseMatMul(Function):
    """Constant sparse matrix times a dense tensor."""

    def forward(self, x, matrix=None):
        _require(matrix.shape[1] == x.shape[0], "sparse matmul shape mismatch",
                 sparse=list(matrix.shape), dense=list(x.shape))
        self.matrix = matrix
        return np.asarray(matrix @ x, dtype=x.dtype)

    def backward(self, grad):
        return (np.asarray(self.matrix.T @ grad, dtype=grad.dtype),)


class Add(Function):
    """Elementwise sum; `b` may also be a bias matching the trailing axis."""

    def forward(self, a, b):
        if a.shape == b.shape:
            self.bias_axes = None
        elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
            self.bias_axes = tuple(range(a.ndim - 1))
        else:
            raise ShapeError("add shape mismatch", {"left": list(a.shape), "right": list(b.shape)})
        return a + b

    def backward(self, grad):
        if self.bias_axes is None:
            return grad, grad
        return grad, grad.sum(axis=self.bias_axes)


class AddConstant(Function):
    def forward(self, x, constant=0.0):
        return x + np.asarray(constant, dtype=x.dtype)

    def backward(self, grad):
        return (grad,)


class Scale(Function):
    def forward(self, x, factor=1.0):
        self.factor = factor
        return x * np.asarray(factor, dtype=x.dtype)

    def backward(self, grad):
        return (grad * np.asarray(self.factor, dtype=grad.dtype),)


class ReLU(Function):
    def forward(self, x):
        self.positive = x > 0
        return np.where(self.positive, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        return (grad * self.positive,)


class SoftmaxRows(Function):
    def forward(self, x):
        _require(x.ndim == 2 and x.shape[1] > 0, "softmax needs non-empty rows", shape=list(x.shape))
        shifted = np.exp(x - x.max(axis=1, keepdims=True))
        self.out = shifted / shifted.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=1, keepdims=True)),)


class LogSoftmaxRows(Function):
    def forward(self, x):
        _require(x.ndim == 2 and x.shape[1] > 0, "log-softmax needs non-empty rows", shape=list(x.shape))
        shifted = x - x.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        out = shifted - log_norm
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=1, keepdims=True),)


class LayerNorm(Function):
    """Normalizes over the last axis; gamma/beta are optional affine terms."""

    def forward(self, x, gamma=None, beta=None, eps=1e-5):
        width = x.shape[-1]
        if gamma is not None:
            _require(gamma.shape == (width,), "layer_norm gamma shape mismatch", gamma=list(gamma.shape))
        if beta is not None:
            _require(beta.shape == (width,), "layer_norm beta shape mismatch", beta=list(beta.shape))
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        self.xhat = centered * self.inv_std
        self.gamma = gamma
        out = self.xhat if gamma is None else self.xhat * gamma
        return out if beta is None else out + beta

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        dxhat = grad if self.gamma is None else grad * self.gamma
        dx = self.inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * np.mean(dxhat * self.xhat, axis=-1, keepdims=True)
        )
        grads = [dx]
        if len(self.parents) > 1:
            grads.append((grad * self.xhat).sum(axis=lead))
        if len(self.parents) > 2:
            grads.append(grad.sum(axis=lead))
        return grads


class Conv1d(Function):
    """(batch, channels, length) convolution via im2col and one GEMM."""

    def forward(self, x, w, b, stride=1, padding=0):
        _require(x.ndim == 3, "conv1d input must be (batch, channels, length)", shape=list(x.shape))
        _require(w.ndim == 3 and w.shape[1] == x.shape[1], "conv1d weight mismatch",
                 input=list(x.shape), weight=list(w.shape))
        _require(b.shape == (w.shape[0],), "conv1d bias mismatch", bias=list(b.shape))
        batch, channels, length = x.shape
        out_channels, _, kernel = w.shape
        padded_len = length + 2 * padding
        _require(padded_len >= kernel, "conv1d kernel longer than padded input",
                 length=length, kernel=kernel, padding=padding)
        out_len = (padded_len - kernel) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
        windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)[:, :, : (out_len - 1) * stride + 1 : stride, :]
        # (batch, out_len, channels * kernel)
        cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(batch * out_len, channels * kernel)
        w_flat = w.reshape(out_channels, channels * kernel)
        out = (cols @ w_flat.T).reshape(batch, out_len, out_channels).transpose(0, 2, 1) + b[None, :, None]
        self.cols, self.w_flat = cols, w_flat
        self.geometry = (batch, channels, length, out_channels, kernel, out_len, stride, padding)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        batch, channels, length, out_channels, kernel, out_len, stride, padding = self.geometry
        grad_rows = grad.transpose(0, 2, 1).reshape(batch * out_len, out_channels)
        grad_w = (grad_rows.T @ self.cols).reshape(out_channels, channels, kernel)
        grad_b = grad.sum(axis=(0, 2))
        grad_cols = (grad_rows @ self.w_flat).reshape(batch, out_len, channels, kernel)
        grad_xp = np.zeros((batch, channels, length + 2 * padding), dtype=grad.dtype)
        span = (out_len - 1) * stride + 1
        for k in range(kernel):
            grad_xp[:, :, k : k + span : stride] += grad_cols[:, :, :, k].transpose(0, 2, 1)
        grad_x = grad_xp[:, :, padding : padding + length] if padding else grad_xp
        return grad_x, grad_w, grad_b


class MaxPool1d(Function):
    """Max over windows of the last axis; ties resolve to the lowest index."""

    def forward(self, x, size=2, stride=2):
        _require(x.ndim == 3, "maxpool1d input must be (batch, channels, length)", shape=list(x.shape))
        _require(x.shape[2] >= size, "maxpool1d window longer than input", length=x.shape[2], size=size)
        out_len = (x.shape[2] - size) // stride + 1
        windows = np.lib.stride_tricks.sliding_window_view(x, size, axis=2)[:, :, : (out_len - 1) * stride + 1 : stride, :]
        offsets = np.argmax(windows, axis=3)
        self.index = offsets + np.arange(out_len)[None, None, :] * stride
        self.input_shape = x.shape
        return np.take_along_axis(windows, offsets[..., None], axis=3)[..., 0]

    def backward(self, grad):
        grad_x = np.zeros(self.input_shape, dtype=grad.dtype)
        batch, channels, _ = self.input_shape
        b_idx = np.arange(batch)[:, None, None]
        c_idx = np.arange(channels)[None, :, None]
        # Windows may overlap when stride < size, so accumulate.
        np.add.at(grad_x, (b_idx, c_idx, self.index), grad)
        return (grad_x,)


class L2NormalizeRows(Function):
    def forward(self, x, eps=1e-12):
        _require(x.ndim == 2, "l2_normalize_rows needs a matrix", shape=list(x.shape))
        self.norm = np.maximum(np.sqrt(np.sum(x * x, axis=1, keepdims=True)), np.asarray(eps, dtype=x.dtype))
        self.out = x / self.norm
        return self.out

    def backward(self, grad):
        y = self.out
        return ((grad - y * np.sum(grad * y, axis=1, keepdims=True)) / self.norm,)


class L2Norm(Function):
    """Frobenius norm of the whole tensor."""

    def forward(self, x):
        self.x = x
        self.norm = np.sqrt(np.sum(x * x))
        return np.asarray(self.norm, dtype=x.dtype)

    def backward(self, grad):
        if self.norm == 0:
            return (np.zeros_like(self.x),)
        return (grad * self.x / self.norm,)


class ReduceSum(Function):
    def forward(self, x, axis=None):
        self.input_shape = x.shape
        self.axis = axis
        return np.asarray(np.sum(x, axis=axis), dtype=x.dtype)

    def backward(self, grad):
        if self.axis is None:
            return (np.broadcast_to(grad, self.input_shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.input_shape).copy(),)


class Transpose(Function):
    def forward(self, x):
        _require(x.ndim == 2, "transpose needs a matrix", shape=list(x.shape))
        return x.T.copy()

    def backward(self, grad):
        return (grad.T.copy(),)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.input_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as error:
            raise ShapeError("reshape size mismatch", {"from": list(x.shape), "to": list(shape)}) from error

    def backward(self, grad):
        return (grad.reshape(self.input_shape),)


class Take(Function):
    """Gather x[rows[i], cols[i]] into a vector."""

    def forward(self, x, rows=None, cols=None):
        _require(x.ndim == 2, "take needs a matrix", shape=list(x.shape))
        self.rows, self.cols = np.asarray(rows), np.asarray(cols)
        self.input_shape = x.shape
        return x[self.rows, self.cols]

    def backward(self, grad):
        grad_x = np.zeros(self.input_shape, dtype=grad.dtype)
        np.add.at(grad_x, (self.rows, self.cols), grad)
        return (grad_x,)


class TraceQuadForm(Function):
    """Tr(S^T A S) - ||S^T d||^2 / 2m with sparse A, i.e. Tr(S^T B S) without forming B."""

    def forward(self, s, adjacency=None, degrees=None, m=None):
        _require(s.ndim == 2 and adjacency.shape == (s.shape[0], s.shape[0]),
                 "trace_quadform shape mismatch", assignments=list(s.shape), adjacency=list(adjacency.shape))
        _require(degrees.shape == (s.shape[0],), "degree vector mismatch", degrees=list(degrees.shape))
        if m <= 0:
            raise ArgumentError("trace_quadform needs at least one edge", {"m": m})
        self.s = s
        self.degrees = degrees.astype(s.dtype)
        self.m = m
        self.a_s = np.asarray(adjacency @ s, dtype=s.dtype)
        self.d_s = self.degrees @ s
        pooled = np.sum(s * self.a_s)
        normalizer = (self.d_s @ self.d_s) / (2.0 * m)
        return np.asarray(pooled - normalizer, dtype=s.dtype)

    def backward(self, grad):
        g = np.asarray(grad, dtype=self.s.dtype)
        grad_s = 2.0 * self.a_s - np.outer(self.degrees, self.d_s) / self.m
        return (g * grad_s,)


Operand = Union[Tensor, np.ndarray, float]


def matmul(a: Operand, b: Operand) -> Tensor:
    return MatMul.apply(a, b)


def sparse_matmul(matrix: sp.spmatrix, x: Operand) -> Tensor:
    return SparseMatMul.apply(x, matrix=sp.csr_matrix(matrix))


def add(a: Operand, b: Operand) -> Tensor:
    """Tensor + Tensor (same shape or trailing-axis bias), or Tensor + constant."""
    if isinstance(b, Tensor):
        return Add.apply(a, b)
    return AddConstant.apply(a, constant=b)


def scale(x: Operand, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def relu(x: Operand) -> Tensor:
    return ReLU.apply(x)


def softmax_rows(x: Operand) -> Tensor:
    return SoftmaxRows.apply(x)


def log_softmax_rows(x: Operand) -> Tensor:
    return LogSoftmaxRows.apply(x)


def layer_norm(x: Operand, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    if beta is not None and gamma is None:
        raise ArgumentError("layer_norm beta requires gamma")
    params = [t for t in (gamma, beta) if t is not None]
    return LayerNorm.apply(x, *params, eps=eps)


def conv1d(x: Operand, w: Operand, b: Operand, stride: int = 1, padding: int = 0) -> Tensor:
    if stride < 1 or padding < 0:
        raise ArgumentError("conv1d needs stride >= 1 and padding >= 0", {"stride": stride, "padding": padding})
    return Conv1d.apply(x, w, b, stride=stride, padding=padding)


def maxpool1d(x: Operand, size: int = 2, stride: int = 2) -> Tensor:
    if size < 1 or stride < 1:
        raise ArgumentError("maxpool1d needs size and stride >= 1", {"size": size, "stride": stride})
    return MaxPool1d.apply(x, size=size, stride=stride)


def l2_normalize_rows(x: Operand, eps: float = 1e-12) -> Tensor:
    return L2NormalizeRows.apply(x, eps=eps)


def l2_norm(x: Operand) -> Tensor:
    return L2Norm.apply(x)


def reduce_sum(x: Operand, axis: Optional[int] = None) -> Tensor:
    return ReduceSum.apply(x, axis=axis)


def mean(x: Operand) -> Tensor:
    x = as_tensor(x)
    return scale(reduce_sum(x), 1.0 / x.data.size)


def transpose(x: Operand) -> Tensor:
    return Transpose.apply(x)


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def take(x: Operand, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    return Take.apply(x, rows=rows, cols=cols)


def trace_quadform(s: Operand, adjacency: sp.spmatrix, degrees: np.ndarray, m: int) -> Tensor:
    return TraceQuadForm.apply(s, adjacency=sp.csr_matrix(adjacency), degrees=np.asarray(degrees), m=m)


def dense_modularity_trace(s: np.ndarray, adjacency: np.ndarray) -> float:
    """Tr(S^T B S) with B = A - dd^T/2m built densely; reference for small graphs."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    degrees = adjacency.sum(axis=1)
    two_m = degrees.sum()
    modularity_matrix = adjacency - np.outer(degrees, degrees) / two_m
    return float(np.trace(s.T @ modularity_matrix @ s))
