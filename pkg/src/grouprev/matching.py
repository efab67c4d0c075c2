"""Minimum-cost one-to-one assignment with unit-cost dummy padding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DUMMY_COST = 1.0


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    """A perfect matching on a (possibly padded) square cost matrix.

    ``dummy_rows`` are padded prediction slots (missed ground truth),
    ``dummy_cols`` are padded ground-truth slots (surplus predictions).
    """

    pairs: tuple[tuple[int, int], ...]
    total_cost: float
    dummy_rows: frozenset[int] = field(default_factory=frozenset)
    dummy_cols: frozenset[int] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.pairs)

    def is_real(self, pair: tuple[int, int]) -> bool:
        return pair[0] not in self.dummy_rows and pair[1] not in self.dummy_cols


def _as_cost_matrix(costs) -> list[list[float]]:
    arr = np.asarray(costs, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise MatchingError(f"cost matrix must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.shape[0] != arr.shape[1]:
        raise MatchingError(f"cost matrix must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MatchingError("cost matrix has non-finite entries")
    if np.any(arr < 0):
        raise MatchingError("cost matrix has negative entries")
    return arr.tolist()


def _solve(c: list[list[float]]) -> tuple[list[int], list[float], list[float]]:
    """Shortest augmenting path Hungarian method, O(n^3).

    Returns ``row_to_col`` and the optimal dual potentials ``u`` (rows) and
    ``v`` (columns), with ``c[i][j] - u[i] - v[j] >= 0`` everywhere.
    """
    n = len(c)
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row (1-based) matched to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic(c: list[list[float]], row_to_col: list[int], u: list[float], v: list[float]) -> list[int]:
    """Smallest optimal matching in row-major lexicographic order.

    Every optimal matching lives on the tight edges of any optimal dual, so
    the canonical answer is the lexicographically first perfect matching of
    that subgraph, found greedily with one alternating-path search per row.
    """
    n = len(c)
    scale = max(1.0, max(max(r) for r in c))
    tol = 1e-11 * scale
    tight = [[c[i][j] - u[i] - v[j] <= tol for j in range(n)] for i in range(n)]
    r2c = list(row_to_col)
    c2r = [0] * n
    for i, j in enumerate(r2c):
        c2r[j] = i

    for r in range(n):
        for col in range(n):
            if col == r2c[r]:
                break
            if not tight[r][col] or c2r[col] < r:
                continue
            # Move r onto col: the row displaced from col must reach r's old
            # column through an alternating path over rows > r.
            displaced = c2r[col]
            target = r2c[r]
            prev_col = {}
            stack = [displaced]
            seen_rows = {displaced}
            found = False
            while stack and not found:
                i = stack.pop()
                for j in range(n):
                    if j == col or not tight[i][j] or j in prev_col:
                        continue
                    prev_col[j] = i
                    if j == target:
                        found = True
                        break
                    nxt = c2r[j]
                    if nxt > r and nxt not in seen_rows:
                        seen_rows.add(nxt)
                        stack.append(nxt)
            if not found:
                continue
            j = target
            while True:
                i = prev_col[j]
                old = r2c[i]
                r2c[i] = j
                c2r[j] = i
                if i == displaced:
                    break
                j = old
            r2c[r] = col
            c2r[col] = r
            break
    return r2c


def hungarian(costs) -> Assignment:
    """Minimum-cost perfect matching of a square non-negative matrix.

    Among equal-cost optima the matching with the lowest column for row 0,
    then row 1, and so on, is returned.
    """
    return _hungarian(_as_cost_matrix(costs))


def _hungarian(c: list[list[float]]) -> Assignment:
    row_to_col, u, v = _solve(c)
    if len(c) > 1:
        row_to_col = _lexicographic(c, row_to_col, u, v)
    pairs = tuple((i, j) for i, j in enumerate(row_to_col))
    total = math.fsum(c[i][j] for i, j in pairs)
    return Assignment(pairs=pairs, total_cost=total)


def pad_costs(costs: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Pad an ``(M, N)`` prediction-vs-truth matrix to square with unit dummies.

    Returns the padded matrix and the counts ``(M, N)``; rows ``>= M`` are
    dummy predictions, columns ``>= N`` dummy ground truth.
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 2:
        raise MatchingError(f"expected an (M, N) cost matrix, got shape {costs.shape}")
    m, n = costs.shape
    if n == 0:
        raise MatchingError("ground truth must contain at least one object")
    size = max(m, n)
    padded = np.full((size, size), DUMMY_COST)
    padded[:m, :n] = costs
    return padded, m, n


def match_cost_matrix(costs: np.ndarray) -> tuple[Assignment, list[float]]:
    """Pad and solve an ``(M, N)`` matrix of prediction-vs-truth costs."""
    padded, m, n = pad_costs(costs)
    if not np.all(np.isfinite(padded)) or np.any(padded < 0):
        raise MatchingError("pairwise costs must be finite and non-negative")
    a = _hungarian(padded.tolist())
    size = padded.shape[0]
    assignment = Assignment(
        pairs=a.pairs,
        total_cost=a.total_cost,
        dummy_rows=frozenset(range(m, size)),
        dummy_cols=frozenset(range(n, size)),
    )
    return assignment, [float(padded[i, j]) for i, j in a.pairs]


def match_objects(pred_boxes: Sequence, pred_points: Sequence, gt_boxes: Sequence, gt_points: Sequence):
    """Match predicted (box, point) objects to ground truth.

    Missing predictions become unit-cost dummy rows and surplus predictions
    are matched against unit-cost dummy columns. Returns the assignment over
    every pair (real and dummy) with the cost of each pair.
    """
    from .consolidation import pairwise_cost_matrix

    if len(pred_boxes) != len(pred_points):
        raise MatchingError("prediction boxes and points differ in length")
    if len(gt_boxes) != len(gt_points):
        raise MatchingError("ground-truth boxes and points differ in length")
    if len(gt_boxes) == 0:
        raise MatchingError("ground truth must contain at least one object")
    costs = pairwise_cost_matrix(pred_boxes, pred_points, gt_boxes, gt_points)
    return match_cost_matrix(costs)
