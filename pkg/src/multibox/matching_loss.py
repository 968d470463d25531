"""The matching-based training objective with exact gradients.

For one image the objective couples every prediction slot (a candidate box
``l_i`` plus confidence ``c_i``) to the ground-truth boxes ``g_j`` through
an injective assignment x:

    f_loc  = 1/2 * sum_matched ||l_i - g_j||^2
    f_conf = -sum_matched log(c_i) - sum_unmatched log(1 - c_i)
    f      = f_conf + alpha * f_loc

Training alternates: solve for the assignment minimizing f, then take a
gradient step treating the assignment as fixed. Gradients are closed-form
with respect to the confidence logits (through the sigmoid) and the raw
location outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONF_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Objective weights: ``alpha`` scales the location term, ``bootstrap_l``
    exempts the top-L most confident slots from the confidence term (0 off)."""

    alpha: float = 0.3
    bootstrap_l: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.bootstrap_l < 0:
            raise ValueError(f"bootstrap_l must be >= 0, got {self.bootstrap_l}")


@dataclass(frozen=True)
class Matching:
    """Injective assignment of ground-truth index j to slot index i.

    ``cost`` is the total objective value f at this assignment.
    """

    assignment: dict[int, int]
    cost: float

    def __post_init__(self):
        slots = list(self.assignment.values())
        if len(set(slots)) != len(slots):
            raise ValueError("matching must be injective on slots")

    def slot_mask(self, n_slots: int) -> np.ndarray:
        """Boolean per-slot mask, True where the slot is matched."""
        mask = np.zeros(n_slots, dtype=bool)
        for i in self.assignment.values():
            mask[i] = True
        return mask


@dataclass(frozen=True)
class LossBundle:
    f_conf: float
    f_loc: float
    f_total: float
    grad_logits: np.ndarray = field(repr=False)
    grad_locs: np.ndarray = field(repr=False)


def _clamp(confidences: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(confidences, dtype=np.float64), CONF_EPS, 1.0 - CONF_EPS)


def _conf_terms(c: np.ndarray, matched: np.ndarray) -> np.ndarray:
    """Per-slot confidence loss terms: -log c if matched else -log(1 - c)."""
    return np.where(matched, -np.log(c), -np.log1p(-c))


def linear_assignment(cost: np.ndarray) -> list[int]:
    """Minimum-cost injective assignment of rows to columns (Hungarian).

    Shortest augmenting path formulation with potentials; requires
    n_rows <= n_cols. Returns, per row, the assigned column index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0:
        return []
    if n > m:
        raise ValueError(f"need n_rows <= n_cols, got {cost.shape}")

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            reach = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(reach)) + 1
            delta = reach[j1 - 1]
            # rows touched by the alternating tree are pairwise distinct
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    row_to_col = [-1] * n
    for j in range(1, m + 1):
        if p[j] > 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def match_cost_matrix(
    locs: np.ndarray, confidences: np.ndarray, gts: np.ndarray, alpha: float
) -> np.ndarray:
    """(n_slots, n_gts) incremental cost of matching slot i to ground truth j.

    Relative to leaving slot i unmatched, matching it adds
    alpha/2 * ||l_i - g_j||^2 - log(c_i) + log(1 - c_i) to the objective.
    """
    locs = np.asarray(locs, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    c = _clamp(confidences)
    sq = np.sum((locs[:, None, :] - gts[None, :, :]) ** 2, axis=2)
    conf_delta = -np.log(c) + np.log1p(-c)
    return alpha * 0.5 * sq + conf_delta[:, None]


def best_matching(
    locs: np.ndarray,
    confidences: np.ndarray,
    gts: np.ndarray,
    cfg: LossConfig,
    exact: bool = True,
) -> Matching:
    """The assignment of ground truths to slots minimizing the objective.

    ``exact`` solves the assignment problem with the Hungarian algorithm;
    otherwise a greedy minimum-cost pass is used as a fast approximation.
    Ties break toward the lowest slot index. Fails when ground truths
    outnumber slots.
    """
    locs = np.asarray(locs, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n_slots, n_gts = locs.shape[0], gts.shape[0]
    if n_gts > n_slots:
        raise ValueError(f"{n_gts} ground truths but only {n_slots} slots")

    if n_gts == 0:
        assignment: dict[int, int] = {}
    else:
        cost = match_cost_matrix(locs, confidences, gts, cfg.alpha)
        if exact:
            gt_to_slot = linear_assignment(cost.T)  # rows = gts, cols = slots
            assignment = {j: i for j, i in enumerate(gt_to_slot)}
        else:
            assignment = {}
            work = cost.copy()
            for _ in range(n_gts):
                i, j = np.unravel_index(np.argmin(work), work.shape)
                assignment[int(j)] = int(i)
                work[i, :] = np.inf
                work[:, j] = np.inf

    matching = Matching(assignment, cost=0.0)
    bundle = multibox_loss(locs, confidences, gts, matching, cfg)
    return Matching(assignment, cost=bundle.f_total)


def multibox_loss(
    locs: np.ndarray,
    confidences: np.ndarray,
    gts: np.ndarray,
    matching: Matching,
    cfg: LossConfig,
) -> LossBundle:
    """Objective value and exact gradients at a fixed matching.

    Confidences are clamped to [1e-7, 1 - 1e-7]. ``grad_logits`` is the
    derivative with respect to the pre-sigmoid logits: c - 1 on matched
    slots and c on unmatched ones; ``grad_locs`` is alpha * (l_i - g_j) on
    matched slots and zero elsewhere.
    """
    locs = np.asarray(locs, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    c = _clamp(confidences)
    n_slots = locs.shape[0]
    if sorted(matching.assignment) != list(range(gts.shape[0])):
        raise ValueError("matching must assign every ground truth exactly once")

    matched = matching.slot_mask(n_slots)
    f_conf = float(np.sum(_conf_terms(c, matched)))
    grad_logits = c - matched.astype(np.float64)

    grad_locs = np.zeros_like(locs)
    f_loc = 0.0
    for j, i in matching.assignment.items():
        diff = locs[i] - gts[j]
        f_loc += 0.5 * float(np.dot(diff, diff))
        grad_locs[i] = cfg.alpha * diff

    return LossBundle(
        f_conf=f_conf,
        f_loc=f_loc,
        f_total=f_conf + cfg.alpha * f_loc,
        grad_logits=grad_logits,
        grad_locs=grad_locs,
    )


def top_confident(confidences: np.ndarray, l: int) -> np.ndarray:
    """Indices of the L most confident slots, ties broken by lower index."""
    c = np.asarray(confidences, dtype=np.float64)
    order = np.lexsort((np.arange(len(c)), -c))
    return order[:l]


def bootstrap_conf_loss(
    confidences: np.ndarray, matching: Matching, l: int
) -> tuple[float, np.ndarray]:
    """Confidence loss with the top-L most confident slots exempted.

    The exemption set is computed from the current confidences before any
    gradient step; exempted slots get exactly zero gradient. With L = 0
    this reproduces the plain confidence term bit for bit.
    """
    c = _clamp(confidences)
    n_slots = len(c)
    if l > n_slots:
        raise ValueError(f"L = {l} exceeds slot count {n_slots}")

    exempt = np.zeros(n_slots, dtype=bool)
    exempt[top_confident(c, l)] = True
    matched = matching.slot_mask(n_slots)

    value = float(np.sum(_conf_terms(c, matched)[~exempt]))
    grad_logits = np.where(exempt, 0.0, c - matched.astype(np.float64))
    return value, grad_logits
