"""Axis-aligned box arithmetic: IoU, clipping, non-maximum suppression.

Boxes live in normalized ``[0, 1]`` coordinates relative to a reference
frame (whole image or a crop) and are stored as float64 throughout.
Everything in this module is a pure function on immutable values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box ``(xmin, ymin, xmax, ymax)`` with xmin <= xmax, ymin <= ymax."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        coords = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def area(self) -> float:
        return self.width * self.height

    def clip(self, lo: float = 0.0, hi: float = 1.0) -> "BBox":
        """Clip all coordinates to ``[lo, hi]``."""
        return BBox(
            min(max(self.xmin, lo), hi),
            min(max(self.ymin, lo), hi),
            min(max(self.xmax, lo), hi),
            min(max(self.ymax, lo), hi),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=np.float64)


@dataclass(frozen=True)
class ScoredBox:
    """A box with a confidence score (a probability, or a raw logit if flagged)."""

    box: BBox
    score: float
    is_logit: bool = False

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


def iou(a: BBox, b: BBox) -> float:
    """Jaccard overlap: intersection area over union area.

    Degenerate pairs (union of zero area) yield 0 by convention, so IoU is
    a total function on valid boxes.
    """
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two box arrays in xyxy layout.

    Args:
        a: (N, 4) boxes
        b: (M, 4) boxes

    Returns:
        (N, M) IoU matrix, with 0 wherever the union has zero area.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.maximum(0.0, a[:, 2] - a[:, 0]) * np.maximum(0.0, a[:, 3] - a[:, 1])
    area_b = np.maximum(0.0, b[:, 2] - b[:, 0]) * np.maximum(0.0, b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.maximum(0.0, rb - lt)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> list[int]:
    """Indices kept by greedy NMS, in descending score order.

    A box is suppressed when its IoU with an already-kept box reaches the
    threshold, so every surviving pair has IoU strictly below it; with
    threshold 1.0 only exact duplicates of a higher-scored box are removed.
    Ties on equal score are broken by input index (stable).
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"nms threshold must be in (0, 1], got {threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if kept:
            overlaps = iou_matrix(boxes[i][None, :], boxes[kept])[0]
            if np.any(overlaps >= threshold):
                continue
        kept.append(i)
    return kept


def nms(boxes: list[ScoredBox], threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression; output sorted by score descending."""
    if not boxes:
        return []
    arr = np.array([b.box.as_array() for b in boxes])
    scores = np.array([b.score for b in boxes])
    return [boxes[i] for i in nms_indices(arr, scores, threshold)]


# --- JSON / JSONL serialization -------------------------------------------
#
# A box is {"xmin", "ymin", "xmax", "ymax"} plus optional "score" and any
# extra fields (e.g. "class_scores", "class_id") which round-trip untouched.
# JSONL files carry one image record per line: {"image_id", "boxes": [...]}.


def box_to_dict(box: BBox, score: float | None = None, **extra) -> dict:
    d = {"xmin": box.xmin, "ymin": box.ymin, "xmax": box.xmax, "ymax": box.ymax}
    if score is not None:
        d["score"] = float(score)
    d.update(extra)
    return d


def box_from_dict(d: dict) -> BBox:
    try:
        return BBox(float(d["xmin"]), float(d["ymin"]), float(d["xmax"]), float(d["ymax"]))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed box record: {d!r}") from exc


def write_jsonl(path, records: list[dict]) -> None:
    """Write one image record per line: {"image_id", "boxes": [...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    """Read image records, validating the {"image_id", "boxes"} envelope."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict) or "image_id" not in rec or "boxes" not in rec:
                raise ValueError(f'{path}:{lineno}: expected {{"image_id", "boxes"}} record')
            for b in rec["boxes"]:
                box_from_dict(b)
            records.append(rec)
    return records
