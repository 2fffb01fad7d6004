"""Single-scale convolutional frame encoder (stride 4) and positional features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, uniform_param
from .tensor import Tensor

STRIDE = 4


@dataclass
class FeatureMap:
    """Per-pixel features at stride 4; ``data`` is ``[..., height * width, channels]``."""

    height: int
    width: int
    data: Tensor

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


class ConvBlock(Module):
    """Odd-sized stride-2 convolution with same padding, ReLU, then per-position layer norm."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3):
        if kernel < 1 or kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        self.weight = uniform_param(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.norm = LayerNorm(c_out)
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(T.relu(T.conv2d(x, self.weight, self.bias, stride=2, padding=self.padding)))


class FrameEncoder(Module):
    def __init__(self, rng: np.random.Generator, dim: int, channels: tuple = (16, 32), in_channels: int = 3, kernel: int = 3):
        self.block1 = ConvBlock(rng, in_channels, channels[0], kernel)
        self.block2 = ConvBlock(rng, channels[0], channels[1], kernel)
        self.proj = Linear(rng, channels[1], dim)

    def __call__(self, frames) -> FeatureMap:
        """Encode ``[..., H, W, C]`` frames into a :class:`FeatureMap` of ``[..., H/4 * W/4, d]``."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
        H, W = x.shape[-3], x.shape[-2]
        if H % STRIDE or W % STRIDE:
            raise ValueError(f"frame size {H}x{W} is not divisible by {STRIDE}")
        y = self.proj(self.block2(self.block1(x)))
        h, w = H // STRIDE, W // STRIDE
        return FeatureMap(h, w, T.reshape(y, y.shape[:-3] + (h * w, y.shape[-1])))


def encode_frame(encoder: FrameEncoder, frame: np.ndarray) -> FeatureMap:
    """Encode a single ``[H, W, C]`` frame."""
    return encoder(frame)


_POS_CACHE: dict = {}


def positional_encoding(h: int, w: int, dim: int, sigma: float = 9.0, seed: int = 1234) -> np.ndarray:
    """Fixed Fourier features of normalized pixel-centre coordinates, ``[h * w, dim]``.

    Coordinates live in [0, 1] regardless of grid size, so grids of different
    resolution share the same positional code for the same image location.
    """
    key = (h, w, dim, sigma, seed)
    if key not in _POS_CACHE:
        if dim % 2:
            raise ValueError("positional encoding needs an even width")
        freqs = np.random.default_rng(seed).normal(0.0, sigma, size=(2, dim // 2))
        ys = (np.arange(h) + 0.5) / h
        xs = (np.arange(w) + 0.5) / w
        coords = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        phase = coords @ freqs
        enc = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
        enc.setflags(write=False)
        _POS_CACHE[key] = enc
    return _POS_CACHE[key]
