"""Match-cost matrix and optimal one-to-one assignment of ground truth to predictions.

The solver is a rectangular shortest-augmenting-path Hungarian method
(rows = ground truth, columns = predictions, ``n_gt <= n_pred``). Columns
left unmatched are the implicit no-object slots. When several assignments
share the optimal cost, the lexicographically smallest sequence of
``pred_index`` (ordered by ``gt_index``) is returned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import clamp_cxcywh, cxcywh_to_xyxy, pairwise_giou_array

DEFAULT_LAMBDA_CLASS = 1.0
DEFAULT_LAMBDA_L1 = 5.0
DEFAULT_LAMBDA_GIOU = 2.0


@dataclass
class CostMatrix:
    costs: np.ndarray

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.costs.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if not np.all(np.isfinite(self.costs)):
            raise ValueError("cost matrix has non-finite entries")

    @property
    def n_gt(self) -> int:
        return self.costs.shape[0]

    @property
    def n_pred(self) -> int:
        return self.costs.shape[1]


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    total_cost: float

    @property
    def pred_indices(self) -> list[int]:
        return [j for _, j in self.pairs]

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def cost_matrix_from_arrays(gt_boxes: np.ndarray, gt_class_index: np.ndarray,
                            pred_probs: np.ndarray, pred_boxes: np.ndarray,
                            lambda_class: float = DEFAULT_LAMBDA_CLASS,
                            lambda_l1: float = DEFAULT_LAMBDA_L1,
                            lambda_giou: float = DEFAULT_LAMBDA_GIOU) -> np.ndarray:
    """Array form of :func:`build_cost_matrix`.

    ``gt_boxes`` (n, 4) and ``pred_boxes`` (m, 4) are normalized cxcywh,
    ``pred_probs`` is (m, n_classes) and ``gt_class_index`` selects the
    probability column for each ground-truth row.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pred_boxes = clamp_cxcywh(np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4))
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    class_cost = -pred_probs[:, np.asarray(gt_class_index, dtype=int)].T
    l1 = np.abs(gt_boxes[:, None, :] - pred_boxes[None, :, :]).sum(-1)
    g = pairwise_giou_array(cxcywh_to_xyxy(gt_boxes), cxcywh_to_xyxy(pred_boxes))
    return lambda_class * class_cost + lambda_l1 * l1 + lambda_giou * (1.0 - g)


def build_cost_matrix(gt, preds, lambda_class: float = DEFAULT_LAMBDA_CLASS,
                      lambda_l1: float = DEFAULT_LAMBDA_L1,
                      lambda_giou: float = DEFAULT_LAMBDA_GIOU) -> CostMatrix:
    """Pairwise matching cost ``-lambda_class * p(c_n) + box_loss(b_n, b_m)``.

    ``gt`` holds :class:`~ulmdetr.simulator.GroundTruthItem` and ``preds``
    holds :class:`~ulmdetr.losses.Prediction`. The class term uses the raw
    probability, not its log.
    """
    from .losses import class_index

    if not preds:
        raise ValueError("need at least one prediction")
    if len(preds) < len(gt):
        raise ValueError(f"{len(gt)} ground-truth items but only {len(preds)} predictions")
    probs = np.stack([p.class_probs for p in preds])
    pboxes = np.stack([p.box.as_array() for p in preds])
    if not gt:
        return CostMatrix(np.zeros((0, len(preds))))
    gboxes = np.stack([g.box.as_array() for g in gt])
    cls = [class_index(g.class_label) for g in gt]
    return CostMatrix(cost_matrix_from_arrays(gboxes, cls, probs, pboxes,
                                              lambda_class, lambda_l1, lambda_giou))


def _hungarian(c: np.ndarray):
    """Rectangular Hungarian method, rows <= cols.

    Returns ``(row_to_col, u, v)`` where ``u + v <= c`` everywhere, equality
    on matched pairs, and ``v <= 0`` with ``v == 0`` on unmatched columns.
    """
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = c[i0 - 1] - u[i0] - v[1:]
            cols = np.flatnonzero(free[1:]) + 1
            cand = cur[cols - 1]
            better = cand < minv[cols]
            minv[cols[better]] = cand[better]
            way[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            j1 = int(cols[k])
            delta = minv[j1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[cols] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _optimal_cost(c: np.ndarray) -> float:
    if c.shape[0] == 0:
        return 0.0
    rows, _, _ = _hungarian(c)
    return float(c[np.arange(c.shape[0]), rows].sum())


def _lexicographic_refine(c: np.ndarray, best: float, tight: np.ndarray, tol: float) -> np.ndarray:
    n, m = c.shape
    chosen = np.full(n, -1, dtype=np.int64)
    fixed_cost = 0.0
    free_cols = np.ones(m, dtype=bool)
    for i in range(n):
        for j in np.flatnonzero(tight[i] & free_cols):
            sub_cols = free_cols.copy()
            sub_cols[j] = False
            rest = _optimal_cost(c[i + 1:][:, sub_cols])
            if fixed_cost + c[i, j] + rest <= best + tol:
                chosen[i] = j
                fixed_cost += c[i, j]
                free_cols[j] = False
                break
        else:  # pragma: no cover - tight set always contains an optimal column
            raise RuntimeError("tie-break refinement lost optimality")
    return chosen


def solve_assignment(c: CostMatrix | np.ndarray, tie_tol: float = 1e-9) -> Assignment:
    """Minimum-cost injective mapping of every ground-truth row to a prediction column.

    ``tie_tol`` (relative to the cost scale) decides which alternative
    optima count as ties for the deterministic tie-break.
    """
    costs = c.costs if isinstance(c, CostMatrix) else CostMatrix(c).costs
    n, m = costs.shape
    if n > m:
        raise ValueError(f"cannot assign {n} ground-truth rows to {m} prediction columns")
    if n == 0:
        return Assignment([], 0.0)
    rows, u, v = _hungarian(costs)
    best = float(costs[np.arange(n), rows].sum())
    tol = tie_tol * max(1.0, float(np.abs(costs).max()))
    # only zero-reduced-cost edges can appear in an optimal assignment
    reduced = costs - u[:, None] - v[None, :]
    tight = reduced <= tol
    if tight.sum() > n:
        rows = _lexicographic_refine(costs, best, tight, tol * n)
        best = float(costs[np.arange(n), rows].sum())
    return Assignment([(i, int(rows[i])) for i in range(n)], best)


def brute_force_assignment(costs: np.ndarray) -> Assignment:
    """Exhaustive search over all injective maps; the test oracle for small matrices."""
    from itertools import permutations

    costs = np.asarray(costs, dtype=np.float64)
    n, m = costs.shape
    if n == 0:
        return Assignment([], 0.0)
    best_perm, best_cost = None, np.inf
    rows = np.arange(n)
    for perm in permutations(range(m), n):
        total = float(costs[rows, perm].sum())
        if total < best_cost:
            best_perm, best_cost = perm, total
    return Assignment([(i, int(j)) for i, j in enumerate(best_perm)], best_cost)


def match_batch(cost_matrices) -> list[Assignment]:
    return [solve_assignment(cm) for cm in cost_matrices]
