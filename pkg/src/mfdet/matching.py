"""Optimal one-to-one assignment between ground truths and predictions.

The matcher maximizes total pairwise IoU with an exact O(n^3)
shortest-augmenting-path solver. The utility matrix is padded with
dummy rows/columns of utility 0 so a complete matching always exists;
dummy matches are reported as unmatched. Ties are resolved
deterministically: rows are augmented in increasing ground-truth index
order and candidate columns are scanned in increasing index order with
strict-improvement updates, which prefers lower (gt, pred) index pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MatchResult:
    gt_to_pred: np.ndarray  # (G,) pred index or -1
    pred_to_gt: np.ndarray  # (N,) gt index or -1
    total: float  # sum of matched utilities, accumulated in gt order

    @property
    def matched_pairs(self):
        return [(i, int(j)) for i, j in enumerate(self.gt_to_pred) if j >= 0]


def _solve_square_min(cost: np.ndarray) -> np.ndarray:
    """Jonker-Volgenant style assignment for a square min-cost matrix.

    Returns col_of_row; deterministic for tied costs (first minimum wins).
    """
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.full(n + 1, -1, dtype=np.int64)  # p[j]: row matched to column j; column 0 is virtual
    way = np.zeros(n + 1, dtype=np.int64)
    # internally 1-indexed columns; cost padded with a leading virtual column
    c = np.full((n, n + 1), INF)
    c[:, 1:] = cost
    for i in range(n):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            cur = c[i0, :] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, INF)
            j1 = int(np.argmin(masked))  # first minimum -> lowest column index
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == -1:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:]] = np.arange(n)
    return col_of_row


def hungarian_match(utility) -> MatchResult:
    """Maximum-total-utility one-to-one assignment for a (G, N) matrix."""
    util = np.asarray(utility, dtype=np.float64)
    if util.ndim != 2:
        raise ValueError("utility matrix must be 2-D")
    g, n = util.shape
    if util.size and not np.all(np.isfinite(util)):
        raise ValueError("utility matrix entries must be finite")
    if g == 0 or n == 0:
        return MatchResult(
            gt_to_pred=np.full(g, -1, dtype=np.int64),
            pred_to_gt=np.full(n, -1, dtype=np.int64),
            total=0.0,
        )
    size = max(g, n)
    padded = np.zeros((size, size))
    padded[:g, :n] = util
    col_of_row = _solve_square_min(-padded)
    gt_to_pred = np.full(g, -1, dtype=np.int64)
    pred_to_gt = np.full(n, -1, dtype=np.int64)
    total = 0.0
    for i in range(g):
        j = int(col_of_row[i])
        if j < n:
            gt_to_pred[i] = j
            pred_to_gt[j] = i
            total += util[i, j]
    return MatchResult(gt_to_pred=gt_to_pred, pred_to_gt=pred_to_gt, total=total)


@dataclass
class GroundTruthAssignment:
    """Positive/negative labels produced by matching plus zero-overlap reassignment.

    Every ground truth owns exactly one positive site: either a proposal
    index or a dense feature-map cell (when its matched proposal had zero
    overlap and the box was reassigned to the nearest pillar).
    """

    proposal_of_gt: np.ndarray  # (G,) proposal index or -1
    cell_of_gt: np.ndarray  # (G, 2) feature-map cell or (-1, -1)
    matched_iou: np.ndarray  # (G,) IoU of the hungarian match (0 if none)
    proposal_labels: np.ndarray  # (N,) +1 positive, 0 negative, -1 invalid slot
    extra_positive_cells: list = field(default_factory=list)  # [(gt, (ix, iy))]

    @property
    def num_positives(self) -> int:
        return int((self.proposal_of_gt >= 0).sum() + (self.cell_of_gt[:, 0] >= 0).sum())


def assign_ground_truth(
    iou: np.ndarray,
    proposal_valid: np.ndarray,
    proposal_cells: np.ndarray,
    gt_centers_xy: np.ndarray,
    cell_centers_xy: np.ndarray,
) -> GroundTruthAssignment:
    """Hungarian assignment with the zero-overlap reassignment rule.

    iou: (G, N) proposal overlap matrix (invalid proposal columns are
    forced to zero utility); cell_centers_xy: (H, W, 2) feature-map cell
    centers. Ground truths whose match has zero IoU are reassigned to
    the nearest feature-map cell not already claimed as positive; that
    cell becomes a positive site even though MaxPoolNMS never kept it.
    """
    g, n = iou.shape
    util = np.where(np.asarray(proposal_valid, dtype=bool)[None, :], iou, 0.0)
    match = hungarian_match(util)
    proposal_of_gt = np.full(g, -1, dtype=np.int64)
    cell_of_gt = np.full((g, 2), -1, dtype=np.int64)
    matched_iou = np.zeros(g)
    labels = np.where(proposal_valid, 0, -1).astype(np.int64)
    taken_cells = set()
    extra = []

    for i in range(g):
        j = match.gt_to_pred[i]
        if j >= 0 and util[i, j] > 0.0:
            proposal_of_gt[i] = j
            matched_iou[i] = util[i, j]
            labels[j] = 1
            taken_cells.add((int(proposal_cells[j, 0]), int(proposal_cells[j, 1])))

    h, w = cell_centers_xy.shape[:2]
    flat_centers = cell_centers_xy.reshape(-1, 2)
    for i in range(g):
        if proposal_of_gt[i] >= 0:
            continue
        d2 = np.sum((flat_centers - gt_centers_xy[i][None, :]) ** 2, axis=1)
        chosen = None
        for flat in np.argsort(d2, kind="stable"):
            cell = (int(flat) // w, int(flat) % w)
            if cell not in taken_cells:
                chosen = cell
                break
        if chosen is None:  # every cell taken; only possible on degenerate tiny grids
            flat = int(np.argmin(d2))
            chosen = (flat // w, flat % w)
        taken_cells.add(chosen)
        cell_of_gt[i] = chosen
        extra.append((i, chosen))

    return GroundTruthAssignment(
        proposal_of_gt=proposal_of_gt,
        cell_of_gt=cell_of_gt,
        matched_iou=matched_iou,
        proposal_labels=labels,
        extra_positive_cells=extra,
    )
