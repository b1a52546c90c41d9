"""Convolutional frame encoder mapping raw frames to unit-norm embeddings."""
from typing import Mapping, Union

import numpy as np

from config.settings import EncoderConfig
from src.autodiff import ops
from src.autodiff.optim import ParamStore
from src.autodiff.tensor import Tensor
from src.dsp.audio import FrameMatrix
from src.utils.errors import ShapeError
from src.utils.seeding import make_rng

ENCODE_CHUNK = 256

Params = Union[ParamStore, Mapping[str, Tensor]]


def init_encoder_params(config: EncoderConfig, seed: int, dtype: str = "float32") -> ParamStore:
    """He-normal conv and projection weights, unit LayerNorm gains, zero biases."""
    rng = make_rng(seed)
    store = ParamStore(dtype)
    channels, length = 1, config.input_len
    for index, (layer, out_len) in enumerate(zip(config.layers, config.stage_lengths())):
        width = channels * length
        store.add(f"layer{index}.ln_gamma", np.ones(width))
        store.add(f"layer{index}.ln_beta", np.zeros(width))
        fan_in = channels * layer.kernel
        store.add(
            f"layer{index}.conv_w",
            rng.standard_normal((layer.filters, channels, layer.kernel)) * np.sqrt(2.0 / fan_in),
        )
        store.add(f"layer{index}.conv_b", np.zeros(layer.filters))
        channels, length = layer.filters, out_len
    store.add("proj.w", rng.standard_normal((config.flat_dim, config.embed_dim)) * np.sqrt(2.0 / config.flat_dim))
    store.add("proj.b", np.zeros(config.embed_dim))
    return store


def encoder_forward(config: EncoderConfig, params: Params, frames: np.ndarray) -> Tensor:
    """Differentiable pass over a (batch, frame_len) array."""
    if frames.ndim != 2 or frames.shape[1] != config.input_len:
        raise ShapeError(
            "frames do not match encoder input length",
            {"shape": list(frames.shape), "input_len": config.input_len},
        )
    dtype = params["proj.w"].dtype
    batch = frames.shape[0]
    x = Tensor(np.asarray(frames, dtype=dtype).reshape(batch, 1, config.input_len))
    for index, layer in enumerate(config.layers):
        _, channels, length = x.shape
        flat = ops.reshape(x, (batch, channels * length))
        flat = ops.layer_norm(flat, params[f"layer{index}.ln_gamma"], params[f"layer{index}.ln_beta"], eps=config.ln_eps)
        x = ops.reshape(flat, (batch, channels, length))
        x = ops.conv1d(
            x,
            params[f"layer{index}.conv_w"],
            params[f"layer{index}.conv_b"],
            stride=layer.stride,
            padding=(layer.kernel - 1) // 2,
        )
        x = ops.relu(x)
        x = ops.maxpool1d(x, size=layer.pool_size, stride=layer.pool_stride)
    flat = ops.reshape(x, (batch, config.flat_dim))
    projected = ops.add(ops.matmul(flat, params["proj.w"]), params["proj.b"])
    return ops.l2_normalize_rows(projected)


def encode(config: EncoderConfig, params: Params, frames: Union[FrameMatrix, np.ndarray]) -> np.ndarray:
    """Embedding matrix (n x embed_dim), rows unit-norm; no gradients are recorded."""
    array = frames.frames if isinstance(frames, FrameMatrix) else np.asarray(frames)
    if array.ndim != 2 or array.shape[1] != config.input_len:
        raise ShapeError(
            "frames do not match encoder input length",
            {"shape": list(array.shape), "input_len": config.input_len},
        )
    constants = params.detached() if isinstance(params, ParamStore) else params
    chunks = [
        encoder_forward(config, constants, array[start:start + ENCODE_CHUNK]).data
        for start in range(0, array.shape[0], ENCODE_CHUNK)
    ]
    if not chunks:
        return np.zeros((0, config.embed_dim))
    return np.concatenate(chunks, axis=0).astype(np.float64)
