"""Whole-video and per-clip inference, test-time augmentation merging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .assignment import hungarian_assign
from .data import VideoSample, downsample_masks
from .encoder import STRIDE
from .losses import DICE_EPS, PROB_CLAMP, MatchCostConfig
from .metrics import Instance
from .model import IFRModel


@dataclass
class VideoPrediction:
    class_probs: np.ndarray  # [N, C]
    masks: np.ndarray  # [N, T, H, W] probabilities
    identities: np.ndarray  # [N]

    @property
    def scores(self) -> np.ndarray:
        return self.class_probs.max(axis=1)

    @property
    def categories(self) -> np.ndarray:
        return self.class_probs.argmax(axis=1)

    @property
    def length(self) -> int:
        return self.masks.shape[1]

    def permuted(self, order) -> "VideoPrediction":
        order = np.asarray(order)
        return VideoPrediction(self.class_probs[order], self.masks[order], self.identities[order])


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel aligned bilinear resize of the last two axes with edge clamping."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def axis_weights(n_in: int, n_out: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    ylo, yhi, wy = axis_weights(h, out_h)
    xlo, xhi, wx = axis_weights(w, out_w)
    rows = arr[..., ylo, :] * (1.0 - wy)[:, None] + arr[..., yhi, :] * wy[:, None]
    return rows[..., xlo] * (1.0 - wx) + rows[..., xhi] * wx


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def infer_frames(model: IFRModel, frames: np.ndarray, out_size: Optional[tuple] = None) -> VideoPrediction:
    """Decode all ``[T, H, W, 3]`` frames jointly; masks are returned at ``out_size`` (default H x W)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ValueError(f"expected [T, H, W, C] frames, got {frames.shape}")
    H, W = frames.shape[1:3]
    if H % STRIDE or W % STRIDE:
        raise ValueError(f"frame size {H}x{W} is not divisible by {STRIDE}")
    out_h, out_w = out_size or (H, W)
    with T.no_grad():
        out = model(frames[None])
        final = out.final
        probs = _sigmoid(final.class_logits.data[0])
        logits = np.matmul(final.kernels.data[0], np.swapaxes(out.features.data[0], -1, -2))  # [T, N, P]
    n, N = logits.shape[:2]
    logits = np.swapaxes(logits, 0, 1).reshape(N, n, out.height, out.width)
    masks = _sigmoid(resize_bilinear(logits, out_h, out_w))
    return VideoPrediction(probs, masks, np.arange(N))


def output_size(h: int, w: int, output_stride: int = 1) -> tuple:
    if output_stride not in (1, STRIDE):
        raise ValueError(f"output stride must be 1 or {STRIDE}, got {output_stride}")
    return h // output_stride, w // output_stride


def infer_video(model: IFRModel, video: VideoSample, output_stride: int = 1) -> VideoPrediction:
    """Masks at input resolution (``output_stride=1``) or on the feature grid (``output_stride=4``)."""
    return infer_frames(model, video.frames, output_size(*video.frames.shape[1:3], output_stride))


def _binary_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[A, ...]`` and ``[B, ...]`` boolean stacks (1 when both empty)."""
    x = a.reshape(len(a), -1).astype(np.float64)
    y = b.reshape(len(b), -1).astype(np.float64)
    inter = x @ y.T
    union = x.sum(1)[:, None] + y.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 1.0)


def clip_windows(n: int, clip_len: int, overlap: int) -> list:
    stride = clip_len - overlap
    starts = list(range(0, max(n - clip_len, 0) + 1, stride))
    if starts[-1] + clip_len < n:
        starts.append(n - clip_len)
    return starts


def associate_clips(prev: VideoPrediction, new: VideoPrediction, prev_frames: slice, new_frames: slice, iou_weight: float = 1.0, cls_weight: float = 0.5) -> np.ndarray:
    """For every track in ``prev`` the index of the matching query of ``new``."""
    a = prev.masks[:, prev_frames] >= 0.5
    b = new.masks[:, new_frames] >= 0.5
    cost = iou_weight * (1.0 - _binary_iou(a, b))
    cost += cls_weight * np.abs(prev.class_probs[:, None, :] - new.class_probs[None, :, :]).sum(-1)
    return hungarian_assign(cost)


def per_clip_infer(model: IFRModel, video: VideoSample, clip_len: int, overlap: int, output_stride: int = 1) -> VideoPrediction:
    """Sliding-window inference with identities carried across windows by overlap matching."""
    n = video.length
    if clip_len >= n:
        return infer_video(model, video, output_stride)
    if clip_len < 2 or not 1 <= overlap < clip_len:
        raise ValueError(f"need clip_len >= 2 and 1 <= overlap < clip_len, got {clip_len}, {overlap}")
    size = output_size(*video.frames.shape[1:3], output_stride)
    starts = clip_windows(n, clip_len, overlap)
    first = infer_frames(model, video.frames[:clip_len], size)
    N = len(first.class_probs)
    masks = np.zeros((N,) + (n,) + first.masks.shape[2:])
    masks[:, :clip_len] = first.masks
    class_sum = first.class_probs.copy()
    end = clip_len
    for count, s in enumerate(starts[1:], start=2):
        win = infer_frames(model, video.frames[s : s + clip_len], size)
        shared = end - s
        so_far = VideoPrediction(class_sum / (count - 1), masks, first.identities)
        match = associate_clips(so_far, win, slice(s, end), slice(0, shared))
        win = win.permuted(match)
        masks[:, end : s + clip_len] = win.masks[:, shared:]
        class_sum += win.class_probs
        end = s + clip_len
    return VideoPrediction(class_sum / len(starts), masks, first.identities.copy())


def tta_cost(pivot: VideoPrediction, other: VideoPrediction, cfg: Optional[MatchCostConfig] = None) -> np.ndarray:
    """Matching cost with the pivot as reference: class L1 distance, soft BCE and 1 - Dice."""
    cfg = cfg or MatchCostConfig()
    N = len(pivot.class_probs)
    ref = pivot.masks.reshape(N, -1)
    p = np.clip(other.masks.reshape(len(other.class_probs), -1), PROB_CLAMP, 1.0 - PROB_CLAMP)
    count = ref.shape[1]
    bce = -(ref @ np.log(p).T + (1.0 - ref) @ np.log(1.0 - p).T) / count
    dice = (2.0 * ref @ other.masks.reshape(len(p), -1).T + DICE_EPS) / (
        ref.sum(1)[:, None] + other.masks.reshape(len(p), -1).sum(1)[None, :] + DICE_EPS
    )
    cls = np.abs(pivot.class_probs[:, None, :] - other.class_probs[None, :, :]).sum(-1)
    return cfg.lambda_c * cls + cfg.lambda_m * bce + cfg.lambda_d * (1.0 - dice)


def tta_merge(
    results: Sequence[VideoPrediction],
    cfg: Optional[MatchCostConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> VideoPrediction:
    """Match every result to a pivot and average class and mask probabilities per matched group.

    The pivot is the first result unless ``rng`` is given, in which case it is
    drawn uniformly.
    """
    if not results:
        raise ValueError("tta_merge needs at least one result")
    shapes = {r.masks.shape for r in results}
    if len(shapes) != 1:
        raise ValueError(f"results disagree on mask shape: {sorted(shapes)}")
    if len(results) == 1:
        r = results[0]
        return VideoPrediction(r.class_probs.copy(), r.masks.copy(), r.identities.copy())
    p = int(rng.integers(len(results))) if rng is not None else 0
    pivot = results[p]
    aligned = []
    for i, r in enumerate(results):
        aligned.append(r if i == p else r.permuted(hungarian_assign(tta_cost(pivot, r, cfg))))
    n = float(len(aligned))
    cls = aligned[0].class_probs.copy()
    masks = aligned[0].masks.copy()
    for r in aligned[1:]:
        cls += r.class_probs
        masks += r.masks
    return VideoPrediction(cls / n, masks / n, pivot.identities.copy())


def scaled_size(h: int, w: int, scale: float) -> tuple:
    return (max(STRIDE, int(round(h * scale / STRIDE)) * STRIDE), max(STRIDE, int(round(w * scale / STRIDE)) * STRIDE))


def tta_infer(
    model: IFRModel,
    video: VideoSample,
    scales: Sequence[float],
    cfg: Optional[MatchCostConfig] = None,
    output_stride: int = 1,
) -> VideoPrediction:
    """Infer at several input resolutions, map every result to a common grid and merge.

    The common grid is the native frame size divided by ``output_stride``.
    """
    H, W = video.frames.shape[1:3]
    size = output_size(H, W, output_stride)
    results = []
    for s in scales:
        h, w = scaled_size(H, W, s)
        frames = video.frames.astype(np.float64)
        if (h, w) != (H, W):
            frames = np.moveaxis(resize_bilinear(np.moveaxis(frames, -1, 1), h, w), 1, -1)
        results.append(infer_frames(model, frames, out_size=size))
    return tta_merge(results, cfg)


def prediction_instances(pred: VideoPrediction, score_threshold: float = 0.05, mask_threshold: float = 0.5) -> list:
    """Binarised evaluation instances for queries whose confidence exceeds the threshold."""
    out = []
    scores, cats = pred.scores, pred.categories
    for q in range(len(scores)):
        if scores[q] > score_threshold:
            out.append(Instance(int(cats[q]), pred.masks[q] >= mask_threshold, float(scores[q]), int(pred.identities[q])))
    return out


def ground_truth_instances(video: VideoSample, output_stride: int = 1) -> list:
    """Ground truth as evaluation instances; ``output_stride > 1`` area-majority pools the masks."""
    output_size(*video.masks.shape[-2:], output_stride)
    masks = video.masks if output_stride == 1 else downsample_masks(video.masks, output_stride)
    return [Instance(int(c), m, 1.0, int(i)) for c, m, i in zip(video.categories, masks, video.instance_ids)]
