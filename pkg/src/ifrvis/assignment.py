"""Rectangular minimum-cost assignment (Hungarian method with shortest augmenting paths)."""

from __future__ import annotations

import numpy as np


class InfeasibleAssignmentError(ValueError):
    """More rows than columns, or non-finite costs."""


def hungarian_assign(cost) -> np.ndarray:
    """Assign every row of an ``[M, N]`` cost matrix (``M <= N``) to a distinct column.

    Returns ``pi`` of length ``M`` with ``pi[i]`` the column given to row ``i``;
    the total ``cost[i, pi[i]]`` is minimal.  Rows are inserted in order and
    ties in the augmenting-path search go to the lowest column index, so the
    result is deterministic.
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2:
        raise InfeasibleAssignmentError(f"cost must be 2-D, got shape {a.shape}")
    m, n = a.shape
    if m > n:
        raise InfeasibleAssignmentError(f"cannot assign {m} rows injectively into {n} columns")
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(a)):
        raise InfeasibleAssignmentError("cost matrix has non-finite entries")

    # 1-based potentials; column 0 is the virtual root of each search.
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = row matched to column j (0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    padded = np.zeros((m + 1, n + 1))
    padded[1:, 1:] = a

    for i in range(1, m + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pi = np.empty(m, dtype=np.int64)
    for j in range(1, n + 1):
        if owner[j]:
            pi[owner[j] - 1] = j - 1
    return pi


def assignment_cost(cost, pi) -> float:
    a = np.asarray(cost, dtype=np.float64)
    return float(a[np.arange(len(pi)), pi].sum())
