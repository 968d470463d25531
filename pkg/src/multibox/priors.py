"""Prior-box construction and evaluation.

Two ways to build a fixed, ordered set of reference boxes ("priors"), each
bound permanently to one network output slot:

* multi-scale grids: for a grid of resolution m, template boxes are
  displaced to the m x m cell centers with pitch 1/(m+1);
* k-means clustering of ground-truth boxes (the non-convolutional
  baseline).

Plus the coverage metric (fraction of ground truths whose best prior
exceeds an IoU threshold) and a greedy template-shape optimizer that
maximizes it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, iou_matrix


@dataclass(frozen=True)
class TemplateBox:
    """Box shape (width, height), centered at the origin before displacement."""

    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"template extents must be positive, got {(self.width, self.height)}")


@dataclass(frozen=True)
class GridSpec:
    """A regular m x m grid of displacement centers with its template shapes.

    Cell pitch is 1/(m+1), so centers lie at {1/(m+1), ..., m/(m+1)} per axis
    and every displaced template intersects the unit square.
    """

    m: int
    templates: tuple[TemplateBox, ...] = ()

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"grid resolution must be >= 1, got {self.m}")
        object.__setattr__(self, "templates", tuple(self.templates))

    @property
    def delta(self) -> float:
        return 1.0 / (self.m + 1)


@dataclass(frozen=True)
class PriorSet:
    """Ordered prior boxes; slot i of the network is forever bound to row i.

    Attributes:
        boxes: (N, 4) float64 xyxy array, clipped to the unit square.
        provenance: one human-readable tag per slot recording which
            grid/template (or cluster) produced it.
        fingerprint: hex digest of the generating configuration.
    """

    boxes: np.ndarray
    provenance: tuple[str, ...]
    fingerprint: str = ""

    def __post_init__(self):
        b = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        object.__setattr__(self, "boxes", b)
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if len(self.provenance) != len(b):
            raise ValueError("provenance length must match prior count")

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def as_bboxes(self) -> list[BBox]:
        return [BBox(*row) for row in self.boxes]

    def to_json(self) -> str:
        payload = {
            "fingerprint": self.fingerprint,
            "provenance": list(self.provenance),
            "priors": [[float(v) for v in row] for row in self.boxes],
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "PriorSet":
        payload = json.loads(text)
        return PriorSet(
            boxes=np.array(payload["priors"], dtype=np.float64).reshape(-1, 4),
            provenance=tuple(payload["provenance"]),
            fingerprint=payload.get("fingerprint", ""),
        )


# Default shape family: 7 aspect ratios at the base scale plus 4 extra
# scales at aspect 1, 11 shapes total. Base side is 1.5x the grid pitch.
DEFAULT_ASPECTS = (1 / 3, 1 / 2, 2 / 3, 1.0, 3 / 2, 2.0, 3.0)
DEFAULT_EXTRA_SCALES = (0.5, 1.5, 2.0, 3.0)


def default_templates(delta: float, count: int = 11) -> tuple[TemplateBox, ...]:
    """The default 11 template shapes for a grid of pitch ``delta``.

    Widths/heights are area-preserving in the aspect sweep: a shape of
    aspect a and scale s has width base*s*sqrt(a) and height base*s/sqrt(a)
    with base = 1.5*delta. ``count`` < 11 takes a prefix of the family.
    """
    base = 1.5 * delta
    shapes = [(1.0, a) for a in DEFAULT_ASPECTS]
    shapes += [(s, 1.0) for s in DEFAULT_EXTRA_SCALES]
    if count > len(shapes):
        raise ValueError(f"at most {len(shapes)} default templates available, asked for {count}")
    return tuple(
        TemplateBox(base * s * np.sqrt(a), base * s / np.sqrt(a)) for s, a in shapes[:count]
    )


def default_grid_specs(resolutions=(8, 6, 4, 3, 2), templates_per_cell: int = 11) -> list[GridSpec]:
    """GridSpecs for the given resolutions with the default template family."""
    specs = []
    for m in resolutions:
        spec = GridSpec(m=m)
        specs.append(GridSpec(m=m, templates=default_templates(spec.delta, templates_per_cell)))
    return specs


def _grid_config_dict(grids: list[GridSpec], include_global: bool) -> dict:
    return {
        "kind": "grid",
        "include_global": bool(include_global),
        "grids": [
            {"m": g.m, "templates": [[t.width, t.height] for t in g.templates]} for g in grids
        ],
    }


def _fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def build_grid_priors(grids: list[GridSpec], include_global: bool = True) -> PriorSet:
    """Displace every template to every cell center of its grid.

    Slot order is row-major over cells, then template index, grids in the
    order given; the full-image prior, when requested, comes last. Boxes are
    clipped to the unit square. The order is bit-stable across runs.
    """
    if not grids:
        raise ValueError("need at least one grid")
    boxes: list[list[float]] = []
    provenance: list[str] = []
    for gi, grid in enumerate(grids):
        d = grid.delta
        for row in range(1, grid.m + 1):
            for col in range(1, grid.m + 1):
                cx, cy = col * d, row * d
                for ti, t in enumerate(grid.templates):
                    boxes.append(
                        [cx - t.width / 2, cy - t.height / 2, cx + t.width / 2, cy + t.height / 2]
                    )
                    provenance.append(f"grid{gi}[m={grid.m}]({row},{col})t{ti}")
    if include_global:
        boxes.append([0.0, 0.0, 1.0, 1.0])
        provenance.append("global")
    arr = np.clip(np.array(boxes, dtype=np.float64).reshape(-1, 4), 0.0, 1.0)
    return PriorSet(arr, tuple(provenance), _fingerprint(_grid_config_dict(grids, include_global)))


def kmeans_priors(gt_boxes: np.ndarray, k: int, seed: int, max_iter: int = 100) -> PriorSet:
    """Lloyd's k-means over 4-d box coordinate vectors, k-means++ seeded.

    Runs to an assignment fixpoint or ``max_iter`` sweeps. Centroids are
    returned in deterministic order (area ascending, then x-center). Fails
    when fewer than k distinct boxes are supplied.
    """
    pts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] < k:
        raise ValueError(f"need at least {k} distinct boxes, got {distinct.shape[0]}")

    rng = np.random.default_rng(seed)

    # k-means++ initialization over the distinct points.
    centers = np.empty((k, 4), dtype=np.float64)
    centers[0] = distinct[rng.integers(distinct.shape[0])]
    d2 = np.sum((distinct - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(len(distinct), 1 / len(distinct))
        centers[i] = distinct[rng.choice(distinct.shape[0], p=probs)]
        d2 = np.minimum(d2, np.sum((distinct - centers[i]) ** 2, axis=1))

    assign = np.full(pts.shape[0], -1, dtype=np.int64)
    for _ in range(max_iter):
        dists = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dists, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for i in range(k):
            members = pts[assign == i]
            if len(members):  # empty clusters keep their previous centroid
                centers[i] = members.mean(axis=0)

    areas = (centers[:, 2] - centers[:, 0]) * (centers[:, 3] - centers[:, 1])
    xc = (centers[:, 0] + centers[:, 2]) / 2
    order = np.lexsort((xc, areas))
    centers = centers[order]

    config = {
        "kind": "kmeans",
        "k": int(k),
        "seed": int(seed),
        "data_sha": hashlib.sha256(np.ascontiguousarray(pts).tobytes()).hexdigest(),
    }
    return PriorSet(centers, tuple(f"kmeans{i}" for i in range(k)), _fingerprint(config))


def coverage(priors: PriorSet, gt_boxes: np.ndarray, t: float = 0.5) -> float:
    """Fraction of ground-truth boxes whose best-IoU prior exceeds ``t`` (strict)."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {t}")
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gts.shape[0] == 0:
        raise ValueError("coverage is undefined for an empty ground-truth set")
    if len(priors) == 0:
        return 0.0
    best = iou_matrix(gts, priors.boxes).max(axis=1)
    return float(np.mean(best > t))


def default_candidate_pool(n_scales: int = 20, n_aspects: int = 10) -> list[TemplateBox]:
    """Log-spaced (scale x aspect) lattice of 200 candidate shapes."""
    scales = np.exp(np.linspace(np.log(0.05), np.log(1.0), n_scales))
    aspects = np.exp(np.linspace(np.log(1 / 3), np.log(3.0), n_aspects))
    return [
        TemplateBox(s * np.sqrt(a), s / np.sqrt(a)) for s in scales for a in aspects
    ]


def _displaced_boxes(template: TemplateBox, m: int) -> np.ndarray:
    d = 1.0 / (m + 1)
    centers = [(col * d, row * d) for row in range(1, m + 1) for col in range(1, m + 1)]
    out = np.array(
        [
            [cx - template.width / 2, cy - template.height / 2,
             cx + template.width / 2, cy + template.height / 2]
            for cx, cy in centers
        ],
        dtype=np.float64,
    )
    return np.clip(out, 0.0, 1.0)


def optimize_templates(
    gt_sample: np.ndarray,
    candidate_pool: list[TemplateBox],
    grids: list[int],
    budget: int,
    t: float = 0.5,
) -> list[GridSpec]:
    """Greedy template selection maximizing coverage of ``gt_sample``.

    Each step adds the (candidate, grid) pair with the largest coverage
    gain, among grids still under the per-grid ``budget``; stops when all
    grids are full or no candidate strictly increases coverage. Ties go to
    the lowest (grid index, candidate index).
    """
    if not candidate_pool:
        raise ValueError("candidate pool must be nonempty")
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    gts = np.asarray(gt_sample, dtype=np.float64).reshape(-1, 4)
    if gts.shape[0] == 0:
        raise ValueError("need a nonempty ground-truth sample")

    # best_per[g][c] = per-gt best IoU of candidate c displaced on grid g
    best_per = [
        [iou_matrix(_displaced_boxes(c, m), gts).max(axis=0) for c in candidate_pool]
        for m in grids
    ]
    chosen: list[list[int]] = [[] for _ in grids]
    best_iou = np.zeros(gts.shape[0], dtype=np.float64)
    covered = 0

    while any(len(c) < budget for c in chosen):
        best_gain, pick = 0, None
        for gi in range(len(grids)):
            if len(chosen[gi]) >= budget:
                continue
            for ci in range(len(candidate_pool)):
                if ci in chosen[gi]:
                    continue
                gain = int(np.sum(np.maximum(best_iou, best_per[gi][ci]) > t)) - covered
                if gain > best_gain:
                    best_gain, pick = gain, (gi, ci)
        if pick is None:
            break
        gi, ci = pick
        chosen[gi].append(ci)
        best_iou = np.maximum(best_iou, best_per[gi][ci])
        covered += best_gain

    # templates are kept in greedy pick order per grid
    return [
        GridSpec(m=m, templates=tuple(candidate_pool[ci] for ci in chosen[gi]))
        for gi, m in enumerate(grids)
    ]
