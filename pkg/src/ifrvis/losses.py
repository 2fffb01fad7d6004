"""Set matching cost, focal / mask / Dice losses and the cross-frame clip loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .assignment import hungarian_assign
from .model import ModelOutput
from .tensor import Tensor

DICE_EPS = 1.0
PROB_CLAMP = 1e-7


@dataclass
class MatchCostConfig:
    lambda_c: float = 2.0
    lambda_m: float = 5.0
    lambda_d: float = 5.0

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_m, self.lambda_d) < 0:
            raise ValueError("matching weights must be non-negative")


@dataclass
class LossConfig:
    lambda_c: float = 2.0
    lambda_m: float = 5.0
    lambda_D: float = 5.0
    lambda_e: float = 0.3
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_m, self.lambda_D, self.lambda_e) < 0:
            raise ValueError("loss weights must be non-negative")

    def match_config(self) -> MatchCostConfig:
        # matching reuses the loss weights; the Dice weight doubles as lambda_d
        return MatchCostConfig(self.lambda_c, self.lambda_m, self.lambda_D)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClipTarget:
    """Ground truth of one clip at feature resolution."""

    classes: np.ndarray  # [M] int
    masks: np.ndarray  # [M, T, P] in {0, 1}


LOSS_TERMS = ("cls", "mask", "dice", "mask_cross", "dice_cross")


# ---------------------------------------------------------------------------
# scalar definitions


def dice_coefficient(gt, pred, eps: float = DICE_EPS) -> float:
    """Smoothed Dice ``(2 sum(gt * pred) + eps) / (sum(gt) + sum(pred) + eps)``."""
    g = np.asarray(gt, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if g.shape != p.shape:
        raise T.ShapeError(f"dice shape mismatch: {g.shape} vs {p.shape}")
    return float((2.0 * np.sum(g * p) + eps) / (np.sum(g) + np.sum(p) + eps))


def focal_loss(prob: float, target: int, gamma: float = 2.0, alpha: float = 0.25) -> float:
    p = float(np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP))
    if target:
        return -alpha * (1.0 - p) ** gamma * np.log(p)
    return -(1.0 - alpha) * p**gamma * np.log(1.0 - p)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def matching_cost(
    gt_class: int,
    gt_masks: np.ndarray,
    class_probs: np.ndarray,
    mask_probs: np.ndarray,
    cfg: Optional[MatchCostConfig] = None,
) -> float:
    """Cost of assigning one ground-truth instance to one prediction.

    ``gt_masks`` and ``mask_probs`` are ``[T, ...]`` per-frame maps.  The BCE term
    is the mean over all frames and pixels; Dice is taken over the
    frame-concatenated masks.
    """
    cfg = cfg or MatchCostConfig()
    class_probs = np.asarray(class_probs, dtype=np.float64)
    if not 0 <= gt_class < class_probs.shape[-1]:
        raise IndexError(f"unknown class index {gt_class}")
    m = np.asarray(gt_masks, dtype=np.float64)
    p = np.clip(np.asarray(mask_probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    if m.shape != p.shape or m.ndim < 1:
        raise T.ShapeError(f"mask shape mismatch: {m.shape} vs {p.shape}")
    bce = float(np.mean(-(m * np.log(p) + (1.0 - m) * np.log(1.0 - p))))
    dice = dice_coefficient(m.reshape(-1), np.asarray(mask_probs, dtype=np.float64).reshape(-1))
    return -cfg.lambda_c * float(class_probs[gt_class]) + cfg.lambda_m * bce + cfg.lambda_d * (1.0 - dice)


def cost_matrix(
    gt_classes: np.ndarray,
    gt_masks: np.ndarray,
    class_probs: np.ndarray,
    mask_logits: np.ndarray,
    cfg: Optional[MatchCostConfig] = None,
) -> np.ndarray:
    """Vectorised matching costs ``[M, N]``.

    ``gt_masks`` is ``[M, T, P]``, ``class_probs`` ``[N, C]`` and ``mask_logits``
    ``[N, T, P]``.
    """
    cfg = cfg or MatchCostConfig()
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    n_cls = class_probs.shape[-1]
    if np.any((gt_classes < 0) | (gt_classes >= n_cls)):
        raise IndexError(f"ground-truth class outside [0, {n_cls})")
    M = len(gt_classes)
    N = class_probs.shape[0]
    if M == 0:
        return np.zeros((0, N))
    g = gt_masks.reshape(M, -1).astype(np.float64)
    x = mask_logits.reshape(N, -1)
    count = g.shape[1]
    bce = (_softplus(x).sum(axis=1)[None, :] - g @ x.T) / count
    p = _sigmoid(x)
    dice = (2.0 * (g @ p.T) + DICE_EPS) / (g.sum(axis=1)[:, None] + p.sum(axis=1)[None, :] + DICE_EPS)
    cls = class_probs[:, gt_classes].T
    return -cfg.lambda_c * cls + cfg.lambda_m * bce + cfg.lambda_d * (1.0 - dice)


def match_clip(output: ModelOutput, targets: Sequence[ClipTarget], cfg: MatchCostConfig) -> list:
    """Hungarian assignment per clip, computed on the final layer's predictions."""
    final = output.final
    with T.no_grad():
        probs = _sigmoid(final.class_logits.data)
        logits = np.matmul(final.kernels.data, np.swapaxes(output.features.data, -1, -2))  # [B, T, N, P]
    out = []
    for b, tgt in enumerate(targets):
        if len(tgt.classes) > probs.shape[1]:
            raise ValueError(f"{len(tgt.classes)} instances exceed {probs.shape[1]} queries")
        per_query = np.swapaxes(logits[b], 0, 1)  # [N, T, P]
        out.append(hungarian_assign(cost_matrix(tgt.classes, tgt.masks, probs[b], per_query, cfg)))
    return out


# ---------------------------------------------------------------------------
# differentiable loss


def _focal_sum(logits: Tensor, targets: np.ndarray, gamma: float, alpha: float) -> Tensor:
    p = T.clamp(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = T.scale(T.mul(T.power(1.0 - p, gamma), T.log(p)), -alpha)
    negl = T.scale(T.mul(T.power(p, gamma), T.log(1.0 - p)), -(1.0 - alpha))
    return T.sum(T.add(T.mul(pos, targets), T.mul(negl, 1.0 - targets)))


def _mask_terms(logits: Tensor, targets: np.ndarray, weight: np.ndarray) -> tuple[Tensor, Tensor]:
    """Summed (mean-pixel BCE, 1 - Dice) over every leading index, weighted by ``weight``.

    ``logits`` and ``targets`` share shape ``[..., P]``; ``weight`` broadcasts
    against the leading axes.
    """
    bce = T.mean(T.bce_with_logits(logits, targets), axis=-1)
    p = T.sigmoid(logits)
    inter = T.sum(T.mul(p, targets), axis=-1)
    denom = T.add(T.sum(p, axis=-1), targets.sum(axis=-1) + DICE_EPS)
    one_minus_dice = T.sub(1.0, T.div(T.add(T.scale(inter, 2.0), DICE_EPS), denom))
    return T.sum(T.mul(bce, weight)), T.sum(T.mul(one_minus_dice, weight))


def build_targets(targets: Sequence[ClipTarget], assignments: Sequence, n_queries: int, n_classes: int, n_frames: int, n_pix: int):
    B = len(targets)
    cls_t = np.zeros((B, n_queries, n_classes))
    mask_t = np.zeros((B, n_frames, n_queries, n_pix))
    matched = np.zeros((B, n_queries))
    for b, (tgt, pi) in enumerate(zip(targets, assignments)):
        if len(pi) != len(tgt.classes):
            raise ValueError(f"assignment covers {len(pi)} of {len(tgt.classes)} instances")
        if len(pi) == 0:
            continue
        if tgt.masks.shape[1:] != (n_frames, n_pix):
            raise ValueError(f"target masks {tgt.masks.shape} do not fit {n_frames} frames x {n_pix} pixels")
        cls_t[b, pi, tgt.classes] = 1.0
        mask_t[b, :, pi, :] = tgt.masks  # advanced indices lead: [M, T, P]
        matched[b, pi] = 1.0
    return cls_t, mask_t, matched


def clip_loss(
    output: ModelOutput,
    targets: Sequence[ClipTarget],
    cfg: Optional[LossConfig] = None,
    assignments: Optional[Sequence] = None,
) -> tuple[Tensor, dict]:
    """Deeply supervised set loss averaged over the clips of a batch.

    The assignment is computed once on the final layer and reused for every
    supervised layer.  Matched queries get mask BCE and Dice losses at every
    frame, plus ``lambda_e``-weighted terms where the kernel from frame ``t1``
    is applied to the features of frame ``t2 != t1`` and scored against the
    ``t2`` ground truth.
    """
    cfg = cfg or LossConfig()
    if assignments is None:
        assignments = match_clip(output, targets, cfg.match_config())
    feats = output.features  # [B, T, P, d]
    B, n_frames, n_pix, _ = feats.shape
    n_queries, n_classes = output.final.class_logits.shape[-2:]
    if len(targets) != B:
        raise ValueError(f"{len(targets)} targets for a batch of {B}")
    cls_t, mask_t, matched = build_targets(targets, assignments, n_queries, n_classes, n_frames, n_pix)
    feats_t = T.swapaxes(feats, -1, -2)  # [B, T, d, P]
    use_cross = cfg.lambda_e != 0.0 and n_frames > 1
    if use_cross:
        off = 1.0 - np.eye(n_frames)
        cross_weight = off[None, :, :, None] * matched[:, None, None, :]  # [B, T2, T1, N]
        cross_target = np.broadcast_to(mask_t[:, :, None], (B, n_frames, n_frames, n_queries, n_pix))

    terms = {k: None for k in LOSS_TERMS}

    def acc(key: str, val: Tensor) -> None:
        terms[key] = val if terms[key] is None else T.add(terms[key], val)

    for layer in output.layers:
        acc("cls", T.scale(_focal_sum(layer.class_logits, cls_t, cfg.gamma, cfg.alpha), cfg.lambda_c))
        diag_logits = T.matmul(layer.kernels, feats_t)  # [B, T, N, P]
        bce, dice = _mask_terms(diag_logits, mask_t, matched[:, None, :])
        acc("mask", T.scale(bce, cfg.lambda_m))
        acc("dice", T.scale(dice, cfg.lambda_D))
        if use_cross:
            k = layer.kernels
            flat = T.reshape(k, (B, 1, n_frames * n_queries, k.shape[-1]))
            cross = T.reshape(T.matmul(flat, feats_t), (B, n_frames, n_frames, n_queries, n_pix))
            cbce, cdice = _mask_terms(cross, cross_target, cross_weight)
            acc("mask_cross", T.scale(cbce, cfg.lambda_m * cfg.lambda_e))
            acc("dice_cross", T.scale(cdice, cfg.lambda_D * cfg.lambda_e))

    total = None
    for key in LOSS_TERMS:
        if terms[key] is not None:
            terms[key] = T.scale(terms[key], 1.0 / B)
            total = terms[key] if total is None else T.add(total, terms[key])
    breakdown = {k: (float(v.data) if v is not None else 0.0) for k, v in terms.items()}
    breakdown["total"] = float(total.data)
    return total, breakdown
