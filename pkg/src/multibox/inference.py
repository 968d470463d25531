"""From slot outputs to ranked proposals and final detections.

Decoding adds each slot's residual to its prior. Multi-crop inference runs
the proposer on the whole image plus sliding square windows at configured
scales; per-crop proposals that are not fully inside the crop's central
containment window get dropped (partial objects at crop borders otherwise
produce confident junk), survivors are mapped back to whole-image
coordinates and merged with NMS. Post-classification scores each proposal
crop, averaging the combiner over a fixed set of large context crops, and
multi-model ensembling reinforces detections that agree across models.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BBox, ScoredBox, iou_matrix, nms, nms_indices
from .imageops import sample_window
from .priors import PriorSet
from .toynet.layers import sigmoid
from .toynet.nets import PostClassifierNet, ProposerNet, SlotPredictions

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CropWindow:
    """A square crop in whole-image normalized coordinates, tagged by scale."""

    window: BBox
    scale: float

    def __post_init__(self):
        w = self.window
        if not (0.0 <= w.xmin and w.xmax <= 1.0 and 0.0 <= w.ymin and w.ymax <= 1.0):
            raise ValueError(f"crop window must lie within the unit square: {w}")


@dataclass(frozen=True, eq=False)
class Detection:
    """A decoded box with a class-agnostic confidence and per-class scores."""

    box: BBox
    confidence: float
    class_scores: np.ndarray = field(repr=False)
    source: str = ""


@dataclass(frozen=True)
class MultiCropConfig:
    scales: tuple[float, ...] = (1.0, 185 / 299)
    min_overlap: float = 0.5
    containment_margin: float = 0.1
    nms_threshold: float = 0.85
    include_whole: bool = True


def decode_slots(preds: SlotPredictions, priors: PriorSet) -> list[ScoredBox]:
    """Residual + prior per slot, clipped to the frame; score = sigmoid(logit)."""
    boxes, scores = decode_slot_arrays(preds, priors)
    return [ScoredBox(BBox(*row), float(s)) for row, s in zip(boxes, scores)]


def decode_slot_arrays(preds: SlotPredictions, priors: PriorSet):
    if len(preds) != len(priors):
        raise ValueError(f"{len(preds)} slots vs {len(priors)} priors")
    raw = preds.residuals + priors.boxes
    # guard against inverted corners from wild residuals before clipping
    x1 = np.minimum(raw[:, 0], raw[:, 2])
    x2 = np.maximum(raw[:, 0], raw[:, 2])
    y1 = np.minimum(raw[:, 1], raw[:, 3])
    y2 = np.maximum(raw[:, 1], raw[:, 3])
    boxes = np.clip(np.stack([x1, y1, x2, y2], axis=1), 0.0, 1.0)
    return boxes, sigmoid(preds.logits)


def select_topk(proposals: list[ScoredBox], k: int) -> list[ScoredBox]:
    """The k highest-confidence proposals, in their original relative order."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k >= len(proposals):
        return list(proposals)
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
    chosen = sorted(order[:k])
    return [proposals[i] for i in chosen]


def _axis_positions(extent: float, side: float, min_overlap: float) -> list[float]:
    if side >= extent:
        return [0.0]
    max_stride = side * (1.0 - min_overlap)
    n = 1 + int(np.ceil((extent - side) / max_stride - 1e-12))
    stride = (extent - side) / (n - 1)
    return [extent - side if i == n - 1 else i * stride for i in range(n)]


def tile_crops(image_aspect: float, crop_scale: float, min_overlap: float) -> list[CropWindow]:
    """Square windows of side ``crop_scale`` (relative to the smaller image
    side) tiled so adjacent windows overlap at least ``min_overlap`` of a
    side, with the minimal number of uniformly strided positions per axis.
    """
    if not 0.0 < crop_scale <= 1.0:
        raise ValueError(f"crop_scale must be in (0, 1], got {crop_scale}")
    if not 0.0 <= min_overlap < 1.0:
        raise ValueError(f"min_overlap must be in [0, 1), got {min_overlap}")
    if image_aspect <= 0:
        raise ValueError(f"aspect must be positive, got {image_aspect}")

    # work in units of the smaller side, then normalize each axis to [0, 1]
    ex = max(image_aspect, 1.0)
    ey = max(1.0 / image_aspect, 1.0)
    xs = _axis_positions(ex, crop_scale, min_overlap)
    ys = _axis_positions(ey, crop_scale, min_overlap)
    sx = min(crop_scale, ex)
    sy = min(crop_scale, ey)
    out = []
    for y0 in ys:
        for x0 in xs:
            window = BBox(
                x0 / ex,
                y0 / ey,
                min((x0 + sx) / ex, 1.0),  # the last window's edge is the frame edge
                min((y0 + sy) / ey, 1.0),
            )
            out.append(CropWindow(window, crop_scale))
    return out


def _contained(boxes: np.ndarray, margin: float) -> np.ndarray:
    lo, hi = margin, 1.0 - margin
    return (
        (boxes[:, 0] >= lo) & (boxes[:, 1] >= lo) & (boxes[:, 2] <= hi) & (boxes[:, 3] <= hi)
    )


def propose(
    net: ProposerNet, priors: PriorSet, image: np.ndarray, nms_threshold: float = 0.85
) -> list[ScoredBox]:
    """Single-crop pipeline: forward, decode, NMS; sorted by score."""
    return multi_crop_propose(
        net,
        priors,
        image,
        MultiCropConfig(scales=(), nms_threshold=nms_threshold, include_whole=True),
    )


def multi_crop_propose(
    net: ProposerNet, priors: PriorSet, image: np.ndarray, cfg: MultiCropConfig = MultiCropConfig()
) -> list[ScoredBox]:
    """Union of per-crop proposals mapped to whole-image coordinates, NMS-merged.

    The whole-image pass keeps everything it predicts; sliding-window passes
    keep only proposals fully inside the central containment window
    (margin .. 1-margin per axis) of their crop.
    """
    h, w, _ = image.shape
    aspect = w / h
    crops: list[tuple[CropWindow, bool]] = []
    if cfg.include_whole:
        crops.append((CropWindow(BBox(0.0, 0.0, 1.0, 1.0), 1.0), False))
    for scale in cfg.scales:
        for cw in tile_crops(aspect, scale, cfg.min_overlap):
            crops.append((cw, True))

    size = net.config.input_size
    merged: list[ScoredBox] = []
    for cw, filtered in crops:
        crop_img = sample_window(image, cw.window, size, size)
        preds, _ = net.forward(crop_img)
        boxes, scores = decode_slot_arrays(preds, priors)
        if filtered:
            keep = _contained(boxes, cfg.containment_margin)
            boxes, scores = boxes[keep], scores[keep]
        win = cw.window
        mapped = np.empty_like(boxes)
        mapped[:, 0] = win.xmin + boxes[:, 0] * win.width
        mapped[:, 2] = win.xmin + boxes[:, 2] * win.width
        mapped[:, 1] = win.ymin + boxes[:, 1] * win.height
        mapped[:, 3] = win.ymin + boxes[:, 3] * win.height
        merged.extend(
            ScoredBox(BBox(*row), float(s)) for row, s in zip(mapped, scores)
        )
    return nms(merged, cfg.nms_threshold)


def default_context_windows(size: float = 0.8) -> list[BBox]:
    """Whole image, four corner squares, and one centered square of the
    given relative size — the six standard context crops."""
    lo = 1.0 - size
    half = lo / 2.0
    return [
        BBox(0.0, 0.0, 1.0, 1.0),
        BBox(0.0, 0.0, size, size),
        BBox(lo, 0.0, 1.0, size),
        BBox(0.0, lo, size, 1.0),
        BBox(lo, lo, 1.0, 1.0),
        BBox(half, half, half + size, half + size),
    ]


def classify_detections(
    pc_net: PostClassifierNet,
    ctx_net: PostClassifierNet | None,
    image: np.ndarray,
    proposals: list[ScoredBox],
    context_windows: list[BBox] | None = None,
    source: str = "",
) -> list[Detection]:
    """Post-classify each proposal crop, averaging over the context crops.

    Context features are extracted once per image (one vector per context
    window); each proposal's object features are computed once and scored
    against every context vector, the class distribution being the mean of
    the per-context combiner outputs. Without a context net the combiner
    sees a zero context vector. Zero-area proposals are skipped.
    """
    size = pc_net.config.input_size
    contexts: list[np.ndarray | None]
    if ctx_net is None:
        contexts = [None]
    else:
        windows = default_context_windows() if context_windows is None else context_windows
        ctx_size = ctx_net.config.input_size
        contexts = [
            ctx_net.crop_features(sample_window(image, win, ctx_size, ctx_size))[0]
            for win in windows
        ]

    out: list[Detection] = []
    for prop in proposals:
        if prop.box.area() <= 0.0:
            logger.warning("skipping zero-area proposal %s", prop.box)
            continue
        crop = sample_window(image, prop.box, size, size)
        features, _ = pc_net.crop_features(crop)
        scores = np.mean(
            [pc_net.classify(features, ctx)[0] for ctx in contexts], axis=0
        )
        out.append(Detection(prop.box, prop.score, scores, source))
    return out


def ensemble_scores(per_model: list[list[Detection]]) -> list[list[np.ndarray]]:
    """Cross-model reinforced class scores, before any suppression.

    For detection i of model j and class k the new score is

        s = (c_ijk + sum over other models n of max_m J(box_ij, box_mn) * c_mnk) / N

    where J is the Jaccard overlap; a model with no detections contributes 0.
    """
    n_models = len(per_model)
    if n_models < 1:
        raise ValueError("need at least one model")
    box_arrays = [
        np.stack([d.box.as_array() for d in dets]) if dets else np.zeros((0, 4))
        for dets in per_model
    ]
    score_arrays = [
        np.stack([d.class_scores for d in dets]) if dets else None for dets in per_model
    ]

    out: list[list[np.ndarray]] = []
    for j, dets in enumerate(per_model):
        if not dets:
            out.append([])
            continue
        total = score_arrays[j].astype(np.float64).copy()
        for n in range(n_models):
            if n == j or not per_model[n]:
                continue
            overlap = iou_matrix(box_arrays[j], box_arrays[n])  # (i, m)
            # max over the other model's detections of J * c, per class
            contrib = overlap[:, :, None] * score_arrays[n][None, :, :]
            total += contrib.max(axis=1)
        out.append(list(total / n_models))
    return out


def ensemble_multibox(
    per_model: list[list[Detection]],
    nms_threshold: float = 0.5,
    background_class: int = 0,
) -> list[Detection]:
    """Cross-model score reinforcement followed by per-class NMS.

    Detections keep their reinforced scores for the classes where they
    survive suppression (other foreground scores are zeroed); detections
    suppressed for every foreground class are dropped.
    """
    scored = ensemble_scores(per_model)
    flat: list[Detection] = []
    for dets, new_scores in zip(per_model, scored):
        for d, s in zip(dets, new_scores):
            flat.append(replace(d, class_scores=s))
    if not flat:
        return []

    n_classes = flat[0].class_scores.shape[0]
    boxes = np.stack([d.box.as_array() for d in flat])
    keep_mask = np.zeros((len(flat), n_classes), dtype=bool)
    for k in range(n_classes):
        if k == background_class:
            continue
        scores_k = np.array([d.class_scores[k] for d in flat])
        keep_mask[nms_indices(boxes, scores_k, nms_threshold), k] = True

    out = []
    for i, d in enumerate(flat):
        if not keep_mask[i].any():
            continue
        scores = np.where(keep_mask[i], d.class_scores, 0.0)
        scores[background_class] = d.class_scores[background_class]
        out.append(replace(d, class_scores=scores))
    return out
