"""Proposal- and detection-quality measurement.

Recall: a ground truth counts as recalled at IoU threshold t when the
greedy score-ordered one-to-one assignment matches it to a kept proposal
with IoU strictly above t (each proposal credits at most one ground truth
and vice versa). The recall table sweeps score cutoffs -- by default the
sigmoid of 15 pre-sigmoid thresholds from 2 down to -12 -- producing rows
keyed by the resulting average proposals per image.

AP: standard precision/recall integration with all-points interpolation
over detections sorted by score.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, ScoredBox, iou_matrix
from .inference import Detection, select_topk

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLDS = (0.5, 0.6, 0.7, 0.8)


def default_score_cutoffs(n: int = 15, logit_hi: float = 2.0, logit_lo: float = -12.0):
    """Score cutoffs from evenly spaced pre-sigmoid thresholds, descending."""
    logits = np.linspace(logit_hi, logit_lo, n)
    return tuple(float(1.0 / (1.0 + np.exp(-z))) for z in logits)


@dataclass(frozen=True)
class RecallTable:
    """Rows keyed by average kept proposals per image (ascending); columns by
    IoU threshold. ``cells`` holds per-class average recall, ``agnostic``
    the class-blind recall over all ground truths."""

    budgets: tuple[float, ...]
    cutoffs: tuple[float, ...]
    thresholds: tuple[float, ...]
    cells: np.ndarray = field(repr=False)
    agnostic: np.ndarray = field(repr=False)

    def __post_init__(self):
        assert self.cells.shape == (len(self.budgets), len(self.thresholds))
        assert np.all((self.cells >= 0) & (self.cells <= 1))


@dataclass(frozen=True)
class EvalReport:
    recall: RecallTable
    ap_per_class: dict[int, float | None]
    mean_ap: float | None
    pr_curves: dict[int, list[tuple[float, float]]]
    fingerprint: str


def _greedy_match(proposals: list[ScoredBox], gt_boxes: np.ndarray, t: float) -> np.ndarray:
    """Greedy one-to-one matching in score order; returns per-gt matched mask."""
    matched = np.zeros(gt_boxes.shape[0], dtype=bool)
    if gt_boxes.shape[0] == 0 or not proposals:
        return matched
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
    arr = np.stack([proposals[i].box.as_array() for i in order])
    overlaps = iou_matrix(arr, gt_boxes)
    for row in overlaps:
        candidates = np.where(~matched & (row > t))[0]
        if candidates.size:
            matched[candidates[np.argmax(row[candidates])]] = True
    return matched


def recall_table(
    proposals_per_image: list[list[ScoredBox]],
    gts_per_image: list[list[tuple[BBox, int]]],
    thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS,
    score_cutoffs: tuple[float, ...] | None = None,
) -> RecallTable:
    """Recall across (score cutoff, IoU threshold) cells.

    Per-class recall is computed per ground-truth class and averaged over
    the classes present; the class-agnostic aggregate is also kept. Rows
    are ordered by budget ascending.
    """
    if len(proposals_per_image) != len(gts_per_image):
        raise ValueError("proposals and ground truths must cover the same images")
    cutoffs = default_score_cutoffs() if score_cutoffs is None else tuple(score_cutoffs)
    all_classes = sorted({k for gts in gts_per_image for _, k in gts})
    n_gts_total = sum(len(g) for g in gts_per_image)
    if n_gts_total == 0:
        raise ValueError("recall is undefined without ground truths")

    rows = []
    for cutoff in cutoffs:
        kept_per_image = [
            [p for p in props if p.score >= cutoff] for props in proposals_per_image
        ]
        budget = float(np.mean([len(k) for k in kept_per_image]))
        per_t_cells, per_t_agnostic = [], []
        for t in thresholds:
            per_class = {k: [0, 0] for k in all_classes}  # recalled, total
            recalled_total = 0
            for kept, gts in zip(kept_per_image, gts_per_image):
                if not gts:
                    continue
                boxes = np.stack([b.as_array() for b, _ in gts])
                matched = _greedy_match(kept, boxes, t)
                recalled_total += int(matched.sum())
                for (_, k), hit in zip(gts, matched):
                    per_class[k][1] += 1
                    per_class[k][0] += int(hit)
            class_recalls = [r / n for r, n in per_class.values() if n > 0]
            per_t_cells.append(float(np.mean(class_recalls)) if class_recalls else 0.0)
            per_t_agnostic.append(recalled_total / n_gts_total)
        rows.append((budget, cutoff, per_t_cells, per_t_agnostic))

    rows.sort(key=lambda r: r[0])
    return RecallTable(
        budgets=tuple(r[0] for r in rows),
        cutoffs=tuple(r[1] for r in rows),
        thresholds=tuple(thresholds),
        cells=np.array([r[2] for r in rows]),
        agnostic=np.array([r[3] for r in rows]),
    )


def _detection_score(det, class_id: int | None) -> float:
    if class_id is None:
        return det.confidence if isinstance(det, Detection) else det.score
    if not isinstance(det, Detection):
        raise ValueError("per-class AP needs detections with class scores")
    return float(det.class_scores[class_id])


def _pr_points(
    dets_per_image, gts_per_image, class_id: int | None, iou_t: float
) -> tuple[np.ndarray, np.ndarray, int]:
    gt_boxes = []
    for gts in gts_per_image:
        keep = [b for b, k in gts if class_id is None or k == class_id]
        gt_boxes.append(np.stack([b.as_array() for b in keep]) if keep else np.zeros((0, 4)))
    n_gt = sum(len(g) for g in gt_boxes)
    if n_gt == 0:
        return np.array([]), np.array([]), 0

    ranked = sorted(
        (
            (-_detection_score(d, class_id), img, j)
            for img, dets in enumerate(dets_per_image)
            for j, d in enumerate(dets)
        ),
    )
    matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(ranked))
    for rank, (_, img, j) in enumerate(ranked):
        det = dets_per_image[img][j]
        if gt_boxes[img].shape[0] == 0:
            continue
        row = iou_matrix(det.box.as_array()[None, :], gt_boxes[img])[0]
        candidates = np.where(~matched[img] & (row > iou_t))[0]
        if candidates.size:
            matched[img][candidates[np.argmax(row[candidates])]] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(ranked) + 1)
    return recall, precision, n_gt


def average_precision(
    dets_per_image,
    gts_per_image,
    class_id: int | None = None,
    iou_t: float = 0.5,
) -> float | None:
    """Area under the precision-recall curve (all-points interpolation).

    ``class_id`` None evaluates class-agnostically on the class-blind
    confidence. Returns None (with a warning) when the class has no ground
    truth, so the caller can exclude it from the mean.
    """
    recall, precision, n_gt = _pr_points(dets_per_image, gts_per_image, class_id, iou_t)
    if n_gt == 0:
        logger.warning("no ground truth for class %s; AP undefined", class_id)
        return None
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def pr_curve(dets_per_image, gts_per_image, class_id=None, iou_t=0.5):
    recall, precision, _ = _pr_points(dets_per_image, gts_per_image, class_id, iou_t)
    return list(zip(recall.tolist(), precision.tolist()))


def evaluate_detections(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[list[tuple[BBox, int]]],
    classes: list[int],
    iou_t: float = 0.5,
    recall_cutoffs: tuple[float, ...] | None = None,
    config_fingerprint: str = "",
) -> EvalReport:
    """Full report: recall table, per-class AP, mAP, PR curves."""
    proposals = [
        [ScoredBox(d.box, d.confidence) for d in dets] for dets in dets_per_image
    ]
    table = recall_table(proposals, gts_per_image, score_cutoffs=recall_cutoffs)
    ap = {
        k: average_precision(dets_per_image, gts_per_image, k, iou_t) for k in classes
    }
    defined = [v for v in ap.values() if v is not None]
    mean_ap = float(np.mean(defined)) if defined else None
    curves = {k: pr_curve(dets_per_image, gts_per_image, k, iou_t) for k in classes}
    return EvalReport(table, ap, mean_ap, curves, config_fingerprint)


@dataclass(frozen=True)
class SweepPoint:
    k: int
    mean_kept: float
    recall: float
    ap: float


def sweep_budget(
    proposals_per_image: list[list[ScoredBox]],
    gts_per_image: list[list[tuple[BBox, int]]],
    budgets: list[int],
    iou_t: float = 0.5,
) -> list[SweepPoint]:
    """Class-agnostic recall and AP of the top-K proposals per image, per K."""
    out = []
    for k in budgets:
        kept = [select_topk(props, k) for props in proposals_per_image]
        table = recall_table(kept, gts_per_image, thresholds=(iou_t,), score_cutoffs=(0.0,))
        ap = average_precision(kept, gts_per_image, None, iou_t)
        out.append(
            SweepPoint(
                k=int(k),
                mean_kept=float(np.mean([len(props) for props in kept])),
                recall=float(table.agnostic[0, 0]),
                ap=float(ap) if ap is not None else 0.0,
            )
        )
    return out


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


# --- report files -----------------------------------------------------------


def recall_table_csv(table: RecallTable) -> str:
    lines = ["cutoff,budget," + ",".join(
        [f"recall_mean@{t}" for t in table.thresholds]
        + [f"recall_agnostic@{t}" for t in table.thresholds]
    )]
    for i in range(len(table.budgets)):
        cells = [f"{v!r}" for v in table.cells[i]] + [f"{v!r}" for v in table.agnostic[i]]
        lines.append(f"{table.cutoffs[i]!r},{table.budgets[i]!r}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    """Long-format report: one row per (budget, class) plus aggregate rows."""
    lines = ["metric,budget,class,iou,value"]
    t = report.recall
    for i, budget in enumerate(t.budgets):
        for j, thr in enumerate(t.thresholds):
            lines.append(f"recall_class_mean,{budget!r},mean,{thr},{t.cells[i, j]!r}")
            lines.append(f"recall_agnostic,{budget!r},all,{thr},{t.agnostic[i, j]!r}")
    for k, v in sorted(report.ap_per_class.items()):
        lines.append(f"ap,,{k},,{'' if v is None else repr(v)}")
    if report.mean_ap is not None:
        lines.append(f"map,,mean,,{report.mean_ap!r}")
    lines.append(f"fingerprint,,,,{report.fingerprint}")
    return "\n".join(lines) + "\n"


def sweep_csv(points: list[SweepPoint]) -> str:
    lines = ["k,mean_kept,recall,ap"]
    for p in points:
        lines.append(f"{p.k},{p.mean_kept!r},{p.recall!r},{p.ap!r}")
    return "\n".join(lines) + "\n"


def svg_curve(points: list[tuple[float, float]], title: str, width=480, height=320) -> str:
    """A minimal SVG polyline plot on the unit square with axis labels."""
    pad = 40
    inner_w, inner_h = width - 2 * pad, height - 2 * pad

    def sx(x):
        return pad + x * inner_w

    def sy(y):
        return height - pad - y * inner_h

    poly = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{sx(frac):.0f}" y="{height - pad + 16}" text-anchor="middle" '
            f'font-size="10">{frac}</text>'
        )
        parts.append(
            f'<text x="{pad - 6}" y="{sy(frac):.0f}" text-anchor="end" font-size="10">{frac}</text>'
        )
    if poly:
        parts.append(f'<polyline points="{poly}" fill="none" stroke="steelblue" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
