"""A small trainable conv/relu/average-downsample encoder for desk-scale runs.

Convolutions use valid padding, so arbitrary-size inputs produce
correspondingly-sized feature grids instead of being forced to a fixed shape.
The float64 forward (encode_raw) is what training and gradient checks use;
encode() wraps the result into a binary32 SpatialFeatureMap.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FormatError, MismatchError
from .features import MAGIC, VERSION, SpatialFeatureMap, _freeze

# (out_channels, in_channels, kernel_size, downsample)
LayerSpec = tuple[int, int, int, bool]

_CKPT_HEADER = struct.Struct("<4sII")  # magic, version, layer count
_CKPT_LAYER = struct.Struct("<IIII")   # out_c, in_c, kernel_size, downsample flag


@dataclass(frozen=True)
class ConvLayer:
    kernel: np.ndarray  # (out_c, in_c, k, k)
    bias: np.ndarray    # (out_c,)
    downsample: bool = False

    def __post_init__(self) -> None:
        k = np.ascontiguousarray(self.kernel, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if k.ndim != 4 or k.shape[2] != k.shape[3]:
            raise ValueError(f"kernel must be (out_c, in_c, k, k), got {np.shape(self.kernel)}")
        if b.shape != (k.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match out_c {k.shape[0]}")
        if not (np.isfinite(k).all() and np.isfinite(b).all()):
            raise ValueError("layer parameters contain non-finite values")
        object.__setattr__(self, "kernel", _freeze(k))
        object.__setattr__(self, "bias", _freeze(b))
        object.__setattr__(self, "downsample", bool(self.downsample))

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]


@dataclass(frozen=True)
class EncoderParams:
    """Ordered conv layers; an empty stack is the identity adapter for
    precomputed feature maps."""

    layers: tuple[ConvLayer, ...]
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_channels != prev.out_channels:
                raise ValueError(
                    f"layer chain broken: out_c {prev.out_channels} feeds in_c {nxt.in_channels}"
                )

    def parameter_count(self) -> int:
        return sum(l.kernel.size + l.bias.size for l in self.layers)


@dataclass(frozen=True)
class ToyImage:
    """(C, H, W) pixel grid with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"expected non-empty (C, H, W) pixels, got shape {np.shape(self.values)}")
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("pixel values must be finite and within [0, 1]")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LayerGradients:
    kernel: np.ndarray
    bias: np.ndarray


def init_params(layer_specs: Sequence[LayerSpec], seed: int) -> EncoderParams:
    """Seeded initialization: kernel entries zero-mean with 1/sqrt(in_c * k^2)
    fan-in scale, biases zero. An empty spec yields the identity encoder."""
    rng = np.random.default_rng(seed)
    layers = []
    prev_out = None
    for out_c, in_c, k, down in layer_specs:
        if min(out_c, in_c, k) < 1:
            raise ValueError(f"invalid layer spec {(out_c, in_c, k, down)}")
        if prev_out is not None and in_c != prev_out:
            raise ValueError(f"layer chain broken: out_c {prev_out} feeds in_c {in_c}")
        scale = 1.0 / math.sqrt(in_c * k * k)
        layers.append(ConvLayer(rng.standard_normal((out_c, in_c, k, k)) * scale, np.zeros(out_c), down))
        prev_out = out_c
    return EncoderParams(tuple(layers), seed=seed)


def conv2d_valid(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid-padding convolution of a (C, H, W) grid with an (O, C, k, k) kernel."""
    out_c, in_c, k, _ = kernel.shape
    if x.shape[0] != in_c:
        raise MismatchError(f"input channels {x.shape[0]} != kernel in_c {in_c}")
    h = x.shape[1] - k + 1
    w = x.shape[2] - k + 1
    if h < 1 or w < 1:
        raise ValueError(f"input {x.shape[1]}x{x.shape[2]} smaller than kernel {k}x{k}")
    out = np.zeros((out_c, h, w))
    for di in range(k):
        for dj in range(k):
            out += np.einsum("oc,chw->ohw", kernel[:, :, di, dj], x[:, di:di + h, dj:dj + w])
    return out + bias[:, None, None]


def _conv2d_valid_backward(x, kernel, grad_out):
    k = kernel.shape[2]
    h, w = grad_out.shape[1], grad_out.shape[2]
    grad_bias = grad_out.sum(axis=(1, 2))
    grad_kernel = np.zeros_like(kernel)
    grad_x = np.zeros_like(x)
    for di in range(k):
        for dj in range(k):
            patch = x[:, di:di + h, dj:dj + w]
            grad_kernel[:, :, di, dj] = np.einsum("ohw,chw->oc", grad_out, patch)
            grad_x[:, di:di + h, dj:dj + w] += np.einsum("oc,ohw->chw", kernel[:, :, di, dj], grad_out)
    return grad_x, grad_kernel, grad_bias


def _downsample(x: np.ndarray) -> np.ndarray:
    # 2x2 non-overlapping average; a trailing odd row/column is dropped.
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ValueError(f"grid {h}x{w} too small for 2x2 downsampling")
    return x[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


def _downsample_backward(grad_out: np.ndarray, pre_shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = pre_shape
    out = np.zeros((c, h, w))
    h2, w2 = grad_out.shape[1], grad_out.shape[2]
    out[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(grad_out, 2, axis=1), 2, axis=2) / 4.0
    return out


def _forward(values: np.ndarray, layers: tuple[ConvLayer, ...]):
    x = values
    cache = []
    for layer in layers:
        pre = conv2d_valid(x, layer.kernel, layer.bias)
        post = np.maximum(pre, 0.0)
        cache.append((x, pre, post.shape))
        x = _downsample(post) if layer.downsample else post
    return x, cache


def encode_raw(img: ToyImage, params: EncoderParams) -> np.ndarray:
    """Float64 forward pass; the training path and gradient checks run on this."""
    out, _ = _forward(img.values, params.layers)
    return out


def encode(img: ToyImage, params: EncoderParams) -> SpatialFeatureMap:
    """Forward pass wrapped as a feature map. With zero layers the image grid
    is reinterpreted as the feature map unchanged."""
    return SpatialFeatureMap(encode_raw(img, params))


def encode_backward(
    img: ToyImage, params: EncoderParams, upstream_grad: np.ndarray
) -> list[LayerGradients]:
    """Exact reverse-mode parameter gradients for a given gradient w.r.t. the
    encoder output grid. Rectification uses subgradient 0 at exactly 0."""
    out, cache = _forward(img.values, params.layers)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != out.shape:
        raise MismatchError(f"upstream gradient shape {g.shape} != output shape {out.shape}")
    grads: list[LayerGradients | None] = [None] * len(params.layers)
    for i in reversed(range(len(params.layers))):
        layer = params.layers[i]
        x_in, pre, post_shape = cache[i]
        if layer.downsample:
            g = _downsample_backward(g, post_shape)
        g = g * (pre > 0.0)
        g, grad_kernel, grad_bias = _conv2d_valid_backward(x_in, layer.kernel, g)
        grads[i] = LayerGradients(grad_kernel, grad_bias)
    return grads  # type: ignore[return-value]


def sgd_update(params: EncoderParams, grads: Sequence[LayerGradients], learning_rate: float) -> EncoderParams:
    if len(grads) != len(params.layers):
        raise MismatchError(f"{len(grads)} gradients for {len(params.layers)} layers")
    layers = tuple(
        ConvLayer(l.kernel - learning_rate * g.kernel, l.bias - learning_rate * g.bias, l.downsample)
        for l, g in zip(params.layers, grads)
    )
    return EncoderParams(layers, seed=params.seed)


def save_params(params: EncoderParams, path) -> None:
    """Checkpoint: SFRF magic/version, layer manifest (u32 out_c, in_c, k,
    downsample flag per layer), then all kernels followed by all biases as
    binary32 little-endian."""
    parts = [_CKPT_HEADER.pack(MAGIC, VERSION, len(params.layers))]
    for l in params.layers:
        parts.append(_CKPT_LAYER.pack(l.out_channels, l.in_channels, l.kernel_size, int(l.downsample)))
    for l in params.layers:
        parts.append(l.kernel.astype("<f4").tobytes())
    for l in params.layers:
        parts.append(l.bias.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_params(path) -> EncoderParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count = _CKPT_HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = _CKPT_HEADER.size
    shapes = []
    for _ in range(count):
        if len(buf) - offset < _CKPT_LAYER.size:
            raise FormatError(f"{path}: truncated layer manifest")
        out_c, in_c, k, down = _CKPT_LAYER.unpack_from(buf, offset)
        if min(out_c, in_c, k) < 1:
            raise FormatError(f"{path}: invalid layer shape {(out_c, in_c, k)}")
        shapes.append((out_c, in_c, k, bool(down)))
        offset += _CKPT_LAYER.size
    expected = sum(4 * o * i * k * k for o, i, k, _ in shapes) + sum(4 * o for o, _, _, _ in shapes)
    if len(buf) - offset != expected:
        raise FormatError(f"{path}: payload holds {len(buf) - offset} bytes, manifest declares {expected}")
    kernels = []
    for o, i, k, _ in shapes:
        n = 4 * o * i * k * k
        kernels.append(np.frombuffer(buf[offset:offset + n], dtype="<f4").reshape(o, i, k, k))
        offset += n
    layers = []
    for (o, i, k, down), kernel in zip(shapes, kernels):
        bias = np.frombuffer(buf[offset:offset + 4 * o], dtype="<f4")
        offset += 4 * o
        layers.append(ConvLayer(kernel.astype(np.float64), bias.astype(np.float64), down))
    return EncoderParams(tuple(layers))
