"""Brute-force reference implementations shared by unit and acceptance tests."""

import functools
import itertools

import numpy as np

from ifrvis.metrics import box_iou


@functools.lru_cache(maxsize=None)
def _injections(m: int, n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n), m)), dtype=np.int64).reshape(-1, m)


def brute_force_min(cost) -> float:
    """Minimum total cost over every injective row -> column assignment."""
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    if m == 0:
        return 0.0
    perms = _injections(m, n)
    return float(cost[np.arange(m), perms].sum(axis=1).min())


def brute_force_idtp(pred_tracks: dict, gt_tracks: dict, thr: float = 0.5) -> int:
    """Best total per-frame overlap over every one-to-one pairing of gt and predicted tracks."""
    gids, pids = list(gt_tracks), list(pred_tracks)

    def overlap(g, p):
        return sum(
            1
            for bg, bp in zip(gt_tracks[g], pred_tracks[p])
            if bg is not None and bp is not None and box_iou(bg, bp) >= thr
        )

    k = max(len(gids), len(pids))
    if k == 0:
        return 0
    table = np.zeros((k, k), dtype=np.int64)
    for i, g in enumerate(gids):
        for j, p in enumerate(pids):
            table[i, j] = overlap(g, p)
    return int(-brute_force_min(-table))


def random_scenario(rng, max_tracks: int = 5, n_frames: int = 5):
    """Random gt box tracks plus predictions that copy, mix and jitter them."""

    def track():
        y, x = rng.integers(0, 16, size=2)
        vy, vx = rng.integers(-2, 3, size=2)
        out = []
        for t in range(n_frames):
            if rng.random() < 0.15:
                out.append(None)
                continue
            y0, x0 = int(np.clip(y + vy * t, 0, 20)), int(np.clip(x + vx * t, 0, 20))
            out.append((x0, y0, x0 + 3, y0 + 3))
        return out

    gts = {i: track() for i in range(int(rng.integers(0, max_tracks + 1)))}
    preds = {}
    for j in range(int(rng.integers(0, max_tracks + 1))):
        if gts and rng.random() < 0.7:
            # noisy copy of a ground-truth track, sometimes borrowing frames of another
            src = gts[int(rng.integers(len(gts)))]
            other = gts[int(rng.integers(len(gts)))]
            boxes = []
            for t in range(n_frames):
                b = other[t] if rng.random() < 0.3 else src[t]
                if b is not None:
                    d = int(rng.integers(-1, 2))
                    b = (b[0] + d, b[1], b[2] + d, b[3])
                boxes.append(b)
            preds[100 + j] = boxes
        else:
            preds[100 + j] = track()
    return preds, gts
