"""Minimum-cost assignment (Hungarian / shortest augmenting path)."""

from __future__ import annotations

from typing import Dict

import numpy as np


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Row -> column assignment for a square cost matrix.

    Potentials-based O(n^3) augmenting path method; the inner scan over
    columns is vectorized.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_owner = np.zeros(n + 1, dtype=int)  # 1-based row assigned to column j, 0 = free
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[col_owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
    assignment = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        assignment[col_owner[j] - 1] = j - 1
    return assignment


def hungarian_assign(cost) -> Dict[int, int]:
    """Minimum total cost matching of rows to columns.

    Rectangular matrices are padded with zero-cost dummy rows or columns;
    only real row/column pairs are returned.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return {}
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    n = max(rows, cols)
    square = np.zeros((n, n))
    square[:rows, :cols] = cost
    assignment = _solve_square(square)
    return {r: int(assignment[r]) for r in range(rows) if assignment[r] < cols}


def assignment_cost(cost, assignment: Dict[int, int]) -> float:
    cost = np.asarray(cost, dtype=float)
    return float(sum(cost[r, c] for r, c in assignment.items()))
