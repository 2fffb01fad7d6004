"""Full video instance segmentation model: encoder, IFR decoder and heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecoderLayer, Heads, decode_clip
from .encoder import FeatureMap, FrameEncoder, positional_encoding
from .nn import Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    queries: int = 8
    dim: int = 64
    heads: int = 4
    layers: int = 3
    num_classes: int = 3
    encoder_channels: tuple = (16, 32)
    encoder_kernel: int = 3
    recurrent: bool = True
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if min(self.queries, self.dim, self.heads, self.layers, self.num_classes) < 1:
            raise ValueError("model sizes must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.encoder_kernel < 1 or self.encoder_kernel % 2 == 0:
            raise ValueError("encoder kernel size must be odd")
        if self.dim % 2:
            raise ValueError("dim must be even for positional features")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


@dataclass
class LayerPrediction:
    class_logits: Tensor  # [B, N, C]
    kernels: Tensor  # [B, T, N, d]


@dataclass
class ModelOutput:
    features: Tensor  # positioned features [B, T, P, d]
    height: int
    width: int
    layers: list = field(default_factory=list)

    @property
    def final(self) -> LayerPrediction:
        return self.layers[-1]


class IFRModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = FrameEncoder(rng, config.dim, config.encoder_channels, kernel=config.encoder_kernel)
        self.decoder = [DecoderLayer(rng, config.dim, config.heads) for _ in range(config.layers)]
        self.heads = Heads(rng, config.dim, config.num_classes)
        self.query_embed = Tensor(rng.normal(0.0, 0.02, size=(config.queries, config.dim)), requires_grad=True)

    def encoder_parameter_names(self) -> set:
        return {name for name, _ in self.named_parameters() if name.startswith("encoder.")}

    def features(self, frames) -> FeatureMap:
        """Positioned features for ``[B, T, H, W, 3]`` frames: content plus fixed positional code."""
        fmap = self.encoder(frames)
        pos = positional_encoding(fmap.height, fmap.width, self.config.dim)
        return FeatureMap(fmap.height, fmap.width, T.add(fmap.data, pos))

    def __call__(self, frames) -> ModelOutput:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 5:
            raise ValueError(f"expected [B, T, H, W, C] frames, got shape {frames.shape}")
        fmap = self.features(frames)
        n_frames = frames.shape[1]
        per_frame = [FeatureMap(fmap.height, fmap.width, T.take(fmap.data, (slice(None), t))) for t in range(n_frames)]
        result = decode_clip(self.decoder, per_frame, self.query_embed, recurrent=self.config.recurrent)
        out = ModelOutput(fmap.data, fmap.height, fmap.width)
        for layer in result.layers:
            kernels = self.heads.kernels(T.stack(layer.frame_queries, axis=1))
            out.layers.append(LayerPrediction(self.heads.class_logits(layer.clip_queries), kernels))
        return out
