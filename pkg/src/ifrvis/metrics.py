"""Video AP / AR and CLEAR-MOT + identity tracking metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assignment import hungarian_assign

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Instance:
    """One video-level instance: a category, optional confidence and per-frame binary masks."""

    category: int
    masks: np.ndarray  # [T, H, W] bool
    score: float = 1.0
    track_id: int = 0


@dataclass
class MetricsReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AR1: float = 0.0
    AR10: float = 0.0
    IDF1: float = 0.0
    IDP: float = 0.0
    IDR: float = 0.0
    MOTA: float = 0.0
    IDs: int = 0
    per_class_AP: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# geometry


def masks_to_boxes(mask) -> Optional[tuple]:
    """Tight inclusive pixel box ``(x0, y0, x1, y1)`` around the positive pixels, or None."""
    m = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(m.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def box_iou(a: tuple, b: tuple) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def spatiotemporal_iou(pred, gt) -> float:
    """Sum over frames of intersections divided by sum of unions."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask sequences differ in shape: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _iou_matrix(dts: Sequence[Instance], gts: Sequence[Instance]) -> np.ndarray:
    if not dts or not gts:
        return np.zeros((len(dts), len(gts)))
    d = np.stack([x.masks.reshape(-1) for x in dts]).astype(np.float64)
    g = np.stack([x.masks.reshape(-1) for x in gts]).astype(np.float64)
    inter = d @ g.T
    union = d.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1e-12), 1.0)
    return out


# ---------------------------------------------------------------------------
# average precision


def _match_video(dts: list, gts: list, ious: np.ndarray, thr: float) -> np.ndarray:
    """Greedy score-ordered matching; returns a TP flag per detection (dts already sorted)."""
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dts), dtype=bool)
    for di in range(len(dts)):
        best, best_iou = -1, min(thr, 1 - 1e-10)
        for gi in range(len(gts)):
            if taken[gi] or ious[di, gi] < best_iou:
                continue
            best, best_iou = gi, ious[di, gi]
        if best >= 0:
            taken[best] = True
            tp[di] = True
    return tp


def _precision_recall(scores: np.ndarray, tps: np.ndarray, n_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall."""
    if n_gt == 0:
        return float("nan"), float("nan")
    if scores.size == 0:
        return 0.0, 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(~tps[order])
    rc = tp / n_gt
    pr = tp / np.maximum(tp + fp, np.spacing(1))
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    inds = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return float(q.mean()), float(rc[-1])


def video_ap(predictions: Sequence[Sequence[Instance]], ground_truths: Sequence[Sequence[Instance]]) -> dict:
    """AP over IoU thresholds 0.50:0.05:0.95 averaged over classes with ground truth, plus AR@1/10."""
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths cover different numbers of videos")
    classes = sorted({g.category for gts in ground_truths for g in gts})
    n_thr = len(IOU_THRESHOLDS)
    ap = np.zeros((len(classes), n_thr))
    ar = {1: np.zeros((len(classes), n_thr)), 10: np.zeros((len(classes), n_thr))}
    for ci, c in enumerate(classes):
        per_video = []
        n_gt = 0
        for dts, gts in zip(predictions, ground_truths):
            d = sorted([x for x in dts if x.category == c], key=lambda x: -x.score)
            g = [x for x in gts if x.category == c]
            n_gt += len(g)
            per_video.append((d, g, _iou_matrix(d, g)))
        for ti, thr in enumerate(IOU_THRESHOLDS):
            for max_det, sink in ((100, None), (1, ar[1]), (10, ar[10])):
                scores, tps = [], []
                for d, g, ious in per_video:
                    d_k = d[:max_det]
                    tps.append(_match_video(d_k, g, ious[: len(d_k)], thr))
                    scores.append(np.array([x.score for x in d_k]))
                p, r = _precision_recall(np.concatenate(scores) if scores else np.zeros(0), np.concatenate(tps) if tps else np.zeros(0, bool), n_gt)
                if sink is None:
                    ap[ci, ti] = p
                else:
                    sink[ci, ti] = r
    if not classes:
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0, "AR1": 0.0, "AR10": 0.0, "per_class_AP": {}}
    i50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    i75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    return {
        "AP": float(ap.mean()),
        "AP50": float(ap[:, i50].mean()),
        "AP75": float(ap[:, i75].mean()),
        "AR1": float(ar[1].mean()),
        "AR10": float(ar[10].mean()),
        "per_class_AP": {str(c): float(ap[ci].mean()) for ci, c in enumerate(classes)},
    }


# ---------------------------------------------------------------------------
# tracking metrics


def _feasible_matching(cost: np.ndarray, feasible: np.ndarray) -> list:
    """Maximum-cardinality, then minimum-cost, matching restricted to feasible pairs."""
    if cost.size == 0 or not feasible.any():
        return []
    big = 1.0 + 2.0 * np.abs(np.where(feasible, cost, 0.0)).sum() + cost.shape[0] + cost.shape[1]
    c = np.where(feasible, cost, big)
    if c.shape[0] <= c.shape[1]:
        pairs = list(enumerate(hungarian_assign(c)))
    else:
        pairs = [(int(r), j) for j, r in enumerate(hungarian_assign(c.T))]
    return [(int(i), int(j)) for i, j in pairs if feasible[i, j]]


def tracks_from_instances(instances: Sequence[Instance], n_frames: int) -> dict:
    """``{track_id: [box or None per frame]}`` using tight mask boxes."""
    out = {}
    for inst in instances:
        out[inst.track_id] = [masks_to_boxes(inst.masks[t]) for t in range(n_frames)]
    return out


def clear_mot_counts(pred_tracks: dict, gt_tracks: dict, iou_thresh: float = 0.5) -> dict:
    """Frame-by-frame CLEAR-MOT bookkeeping for one video.

    Existing correspondences are kept while their IoU stays above the
    threshold; the remaining pairs are solved by Hungarian assignment on
    ``1 - IoU``.  A switch is counted when a ground-truth track is matched to a
    different prediction than the one it was last matched to.
    """
    n_frames = max([len(v) for v in list(pred_tracks.values()) + list(gt_tracks.values())] or [0])
    last = {}
    counts = {"GT": 0, "FN": 0, "FP": 0, "IDs": 0, "MATCH": 0}
    for t in range(n_frames):
        gids = [g for g, boxes in gt_tracks.items() if t < len(boxes) and boxes[t] is not None]
        pids = [p for p, boxes in pred_tracks.items() if t < len(boxes) and boxes[t] is not None]
        counts["GT"] += len(gids)
        iou = np.array([[box_iou(gt_tracks[g][t], pred_tracks[p][t]) for p in pids] for g in gids]).reshape(len(gids), len(pids))
        ok = iou >= iou_thresh
        used_g, used_p, pairs = set(), set(), []
        for gi, g in enumerate(gids):
            if g in last and last[g] in pids:
                pj = pids.index(last[g])
                if ok[gi, pj] and pj not in used_p:
                    pairs.append((gi, pj, False))
                    used_g.add(gi)
                    used_p.add(pj)
        rest_g = [i for i in range(len(gids)) if i not in used_g]
        rest_p = [j for j in range(len(pids)) if j not in used_p]
        sub = iou[np.ix_(rest_g, rest_p)] if rest_g and rest_p else np.zeros((len(rest_g), len(rest_p)))
        for a, b in _feasible_matching(1.0 - sub, sub >= iou_thresh):
            gi, pj = rest_g[a], rest_p[b]
            switched = gids[gi] in last and last[gids[gi]] != pids[pj]
            pairs.append((gi, pj, switched))
        for gi, pj, switched in pairs:
            counts["IDs"] += int(switched)
            counts["MATCH"] += 1
            last[gids[gi]] = pids[pj]
        counts["FN"] += len(gids) - len(pairs)
        counts["FP"] += len(pids) - len(pairs)
    return counts


def identity_overlap(pred_tracks: dict, gt_tracks: dict, iou_thresh: float = 0.5):
    """Per (gt, pred) trajectory pair: number of frames where both exist with IoU >= threshold."""
    gids, pids = list(gt_tracks), list(pred_tracks)
    tp = np.zeros((len(gids), len(pids)), dtype=np.int64)
    for i, g in enumerate(gids):
        for j, p in enumerate(pids):
            for bg, bp in zip(gt_tracks[g], pred_tracks[p]):
                if bg is not None and bp is not None and box_iou(bg, bp) >= iou_thresh:
                    tp[i, j] += 1
    n_gt = sum(b is not None for boxes in gt_tracks.values() for b in boxes)
    n_pred = sum(b is not None for boxes in pred_tracks.values() for b in boxes)
    return tp, n_gt, n_pred


def identity_counts(pred_tracks: dict, gt_tracks: dict, iou_thresh: float = 0.5) -> dict:
    """IDTP / IDFP / IDFN from the best one-to-one truth-to-prediction trajectory matching."""
    tp, n_gt, n_pred = identity_overlap(pred_tracks, gt_tracks, iou_thresh)
    idtp = 0
    if tp.size:
        pairs = _feasible_matching(-tp.astype(np.float64), np.ones_like(tp, dtype=bool))
        idtp = int(sum(tp[i, j] for i, j in pairs))
    return {"IDTP": idtp, "IDFN": n_gt - idtp, "IDFP": n_pred - idtp}


def _safe_div(a: float, b: float, empty: float = 0.0) -> float:
    return a / b if b else empty


def summarize_mot(counts: dict) -> dict:
    idtp, idfp, idfn = counts["IDTP"], counts["IDFP"], counts["IDFN"]
    no_gt = counts["GT"] == 0 and counts["FP"] == 0
    return {
        "IDF1": _safe_div(2 * idtp, 2 * idtp + idfp + idfn, 1.0 if no_gt else 0.0),
        "IDP": _safe_div(idtp, idtp + idfp, 1.0 if no_gt else 0.0),
        "IDR": _safe_div(idtp, idtp + idfn, 1.0 if no_gt else 0.0),
        "MOTA": 1.0 - _safe_div(counts["FN"] + counts["FP"] + counts["IDs"], counts["GT"], 0.0),
        "IDs": int(counts["IDs"]),
    }


def mot_counts(pred_tracks: dict, gt_tracks: dict, iou_thresh: float = 0.5) -> dict:
    c = clear_mot_counts(pred_tracks, gt_tracks, iou_thresh)
    c.update(identity_counts(pred_tracks, gt_tracks, iou_thresh))
    return c


def mot_metrics(pred_tracks: dict, gt_tracks: dict, iou_thresh: float = 0.5) -> dict:
    """IDF1, IDP, IDR, MOTA and IDs for one video given per-frame boxes of every track."""
    c = mot_counts(pred_tracks, gt_tracks, iou_thresh)
    out = summarize_mot(c)
    out["counts"] = c
    return out


def merge_counts(all_counts: Sequence[dict]) -> dict:
    keys = ("GT", "FN", "FP", "IDs", "MATCH", "IDTP", "IDFN", "IDFP")
    return {k: int(sum(c.get(k, 0) for c in all_counts)) for k in keys}


def evaluate(
    predictions: Sequence[Sequence[Instance]],
    ground_truths: Sequence[Sequence[Instance]],
    iou_thresh: float = 0.5,
) -> MetricsReport:
    """AP family plus tracking metrics accumulated over all videos."""
    ap = video_ap(predictions, ground_truths)
    per_video = []
    for dts, gts in zip(predictions, ground_truths):
        n = max([x.masks.shape[0] for x in list(dts) + list(gts)] or [0])
        per_video.append(mot_counts(tracks_from_instances(dts, n), tracks_from_instances(gts, n), iou_thresh))
    counts = merge_counts(per_video)
    mot = summarize_mot(counts)
    return MetricsReport(
        AP=ap["AP"],
        AP50=ap["AP50"],
        AP75=ap["AP75"],
        AR1=ap["AR1"],
        AR10=ap["AR10"],
        per_class_AP=ap["per_class_AP"],
        counts=counts,
        **mot,
    )
