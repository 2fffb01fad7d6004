"""Inter-frame recurrent transformer decoder and prediction heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .encoder import FeatureMap
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head scaled dot-product attention on already projected inputs.

    ``q`` is ``[..., a, d]``, ``k`` and ``v`` are ``[..., b, d]``.  ``mask`` is a
    boolean ``[a, b]`` array (broadcast over leading axes); pairs where it is
    False receive exactly zero weight.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    dh = d // heads
    a, b = q.shape[-2], k.shape[-2]

    def split(x: Tensor, n: int) -> Tensor:
        return T.swapaxes(T.reshape(x, x.shape[:-2] + (n, heads, dh)), -3, -2)

    qh = split(T.scale(q, 1.0 / np.sqrt(dh)), a)
    kh, vh = split(k, b), split(v, b)
    weights = T.softmax(T.matmul(qh, T.swapaxes(kh, -1, -2)), axis=-1, mask=mask)
    out = T.swapaxes(T.matmul(weights, vh), -3, -2)
    return T.reshape(out, out.shape[:-3] + (a, d))


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.heads = heads
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, memory: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        out = attention(self.q_proj(x), self.k_proj(memory), self.v_proj(memory), self.heads, mask)
        return self.out_proj(out)


class AttentionBlock(Module):
    """attention -> residual -> norm -> feed-forward (4x, relu) -> residual -> norm."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn_mult: int = 4):
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm1 = LayerNorm(dim)
        self.ffn = MLP(rng, [dim, ffn_mult * dim, dim])
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, memory: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = self.norm1(x + self.attn(x, memory, mask))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.cross = AttentionBlock(rng, dim, heads)
        self.frame_self = AttentionBlock(rng, dim, heads)
        self.temporal = AttentionBlock(rng, dim, heads)
        self.clip_self = AttentionBlock(rng, dim, heads)

    def frame_step(
        self,
        clip_q: Tensor,
        prev_frame_q: Tensor,
        features: FeatureMap,
        recurrent: bool = True,
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """One recurrent step: frame queries for the current frame.

        Both query groups cross-attend the current features through the same
        block (attention is row-wise, so one pass over the stacked rows equals
        two separate passes), the ``2N`` rows self-attend, and the
        previous-frame half is kept.  With ``recurrent=False`` the
        previous-frame branch is replaced by the clip queries.
        """
        if clip_q.shape != prev_frame_q.shape:
            raise T.ShapeError(f"query shapes differ: {clip_q.shape} vs {prev_frame_q.shape}")
        first = prev_frame_q if recurrent else clip_q
        stacked = T.concat_rows(first, clip_q)
        if mask is not None:
            mask = np.concatenate([mask, mask], axis=0)
        stacked = self.cross(stacked, features.data, mask)
        stacked = self.frame_self(stacked, stacked)
        return T.chunk_rows(stacked, 2)[0]

    def update_clip(self, clip_q: Tensor, all_frame_q: Tensor) -> Tensor:
        """Temporal cross-attention from clip queries to every frame query, then self-attention."""
        if all_frame_q.shape[-1] != clip_q.shape[-1]:
            raise T.ShapeError(f"width mismatch: {clip_q.shape} vs {all_frame_q.shape}")
        out = self.temporal(clip_q, all_frame_q)
        return self.clip_self(out, out)


def ifr_frame_step(layer: DecoderLayer, clip_q: Tensor, prev_frame_q: Tensor, features: FeatureMap, **kw) -> Tensor:
    return layer.frame_step(clip_q, prev_frame_q, features, **kw)


def update_clip_queries(layer: DecoderLayer, clip_q: Tensor, all_frame_q: Tensor) -> Tensor:
    return layer.update_clip(clip_q, all_frame_q)


@dataclass
class LayerOutput:
    clip_queries: Tensor
    frame_queries: list


@dataclass
class DecodeResult:
    clip_queries: Tensor
    frame_queries: list
    layers: list = field(default_factory=list)


def decode_clip(
    layers: Sequence[DecoderLayer],
    features: Sequence[FeatureMap],
    init_queries: Tensor,
    recurrent: bool = True,
) -> DecodeResult:
    """Run every decoder layer over a clip.

    Each layer restarts the frame recurrence from a copy of its clip queries,
    walks the frames in order, then refreshes the clip queries from all frame
    queries.  Per-layer outputs are kept for deep supervision.
    """
    if not features:
        raise ValueError("decode_clip needs at least one frame")
    if not layers:
        raise ValueError("decode_clip needs at least one layer")
    clip_q = init_queries
    lead = features[0].data.shape[:-2]
    if clip_q.shape[:-2] != lead:
        clip_q = T.add(Tensor(np.zeros(lead + clip_q.shape[-2:])), clip_q)
    outputs = []
    frame_qs: list = []
    for layer in layers:
        prev = clip_q
        frame_qs = []
        for feat in features:
            prev = layer.frame_step(clip_q, prev, feat, recurrent=recurrent)
            frame_qs.append(prev)
        clip_q = layer.update_clip(clip_q, T.concat(frame_qs, axis=-2))
        outputs.append(LayerOutput(clip_q, frame_qs))
    return DecodeResult(clip_q, frame_qs, outputs)


class Heads(Module):
    def __init__(self, rng: np.random.Generator, dim: int, num_classes: int, prior_prob: float = 0.01):
        self.class_head = MLP(rng, [dim, dim, dim, num_classes])
        self.kernel_head = MLP(rng, [dim, dim, dim, dim])
        self.class_head.layers[-1].bias.data[:] = -np.log((1.0 - prior_prob) / prior_prob)

    def class_logits(self, clip_q: Tensor) -> Tensor:
        return self.class_head(clip_q)

    def kernels(self, frame_q: Tensor) -> Tensor:
        return self.kernel_head(frame_q)


def predict_classes(heads: Heads, clip_q: Tensor) -> Tensor:
    """Per-class sigmoid probabilities ``[..., N, C]``."""
    return T.sigmoid(heads.class_logits(clip_q))


def mask_logits(kernels: Tensor, features: Tensor) -> Tensor:
    """Dot every kernel ``[..., N, d]`` with every pixel feature ``[..., P, d]`` -> ``[..., N, P]``."""
    if kernels.shape[-1] != features.shape[-1]:
        raise T.ShapeError(f"kernel width {kernels.shape[-1]} != feature channels {features.shape[-1]}")
    return T.matmul(kernels, T.swapaxes(features, -1, -2))


def predict_masks(heads: Heads, frame_q: Tensor, features: FeatureMap) -> Tensor:
    """Mask probabilities ``[..., N, h, w]`` from per-query dynamic kernels."""
    logits = mask_logits(heads.kernels(frame_q), features.data)
    return T.reshape(T.sigmoid(logits), logits.shape[:-1] + (features.height, features.width))
