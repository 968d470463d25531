"""Procedural scenes with exact ground truth.

Solid-color rectangles, ellipses, and triangles over a low-amplitude noise
background. Ground-truth boxes are derived from each shape's own raster
mask, so they bound its pixels exactly (overlapping later shapes may
occlude earlier ones; the pairwise box IoU is capped by config).

Randomness: every operation builds its generator as
``np.random.default_rng([STREAM_ID, seed])`` with a distinct per-operation
stream id, so the same seed can safely be reused across operations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BBox, box_from_dict, box_to_dict, iou
from .imageops import stretch_axis, stretch_box

_SCENE_STREAM = 101
_DROP_STREAM = 102
_DISTORT_STREAM = 103

SHAPE_CLASSES = ("rectangle", "ellipse", "triangle")  # class ids 1..3; 0 is background


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    classes: tuple[str, ...] = SHAPE_CLASSES
    size_range: tuple[float, float] = (0.18, 0.45)
    size_jitter: float = 0.2
    aspect_range: tuple[float, float] = (0.5, 2.0)
    noise_level: float = 0.05
    max_overlap: float = 0.3

    def __post_init__(self):
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must be <= max_objects")
        lo, hi = self.size_range
        if not (0 < lo <= hi < 1):
            raise ValueError(f"size_range must lie within (0, 1), got {self.size_range}")
        if not 0 <= self.noise_level <= 0.4:
            raise ValueError("noise_level must be in [0, 0.4]")
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes: {sorted(unknown)}")


@dataclass(frozen=True)
class Scene:
    """image: (s, s, 3) float64 in [0, 1]; gts: list of (box, class id)."""

    image: np.ndarray = field(repr=False)
    gts: tuple[tuple[BBox, int], ...]
    seed: int

    def gt_boxes(self) -> np.ndarray:
        if not self.gts:
            return np.zeros((0, 4))
        return np.stack([b.as_array() for b, _ in self.gts])


def _shape_mask(kind: str, cx, cy, w, h, size: int) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)
    if kind == "rectangle":
        return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
    if kind == "ellipse":
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    if kind == "triangle":
        # isoceles: apex up, base at the bottom edge of the box
        ax, ay = cx, cy - h / 2
        bx, by = cx - w / 2, cy + h / 2
        cx2, cy2 = cx + w / 2, cy + h / 2

        def side(px, py, qx, qy):
            return (qx - px) * (yy - py) - (qy - py) * (xx - px)

        d1 = side(ax, ay, bx, by)
        d2 = side(bx, by, cx2, cy2)
        d3 = side(cx2, cy2, ax, ay)
        return ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
    raise ValueError(f"unknown shape kind {kind!r}")


def _mask_bbox(mask: np.ndarray, size: int) -> BBox | None:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return BBox(xs.min() / size, ys.min() / size, (xs.max() + 1) / size, (ys.max() + 1) / size)


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Render one scene; deterministic per seed."""
    rng = np.random.default_rng([_SCENE_STREAM, seed])
    s = cfg.image_size
    image = 0.5 + rng.uniform(-cfg.noise_level, cfg.noise_level, (s, s, 3))

    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    gts: list[tuple[BBox, int]] = []
    placed: list[BBox] = []
    for _ in range(n_objects):
        for _attempt in range(60):
            kind = cfg.classes[int(rng.integers(len(cfg.classes)))]
            color = rng.uniform(0.0, 1.0, 3)
            while np.max(np.abs(color - 0.5)) < 0.2:  # keep away from the gray background
                color = rng.uniform(0.0, 1.0, 3)
            size = rng.uniform(*cfg.size_range)
            size *= rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter)
            aspect = rng.uniform(*cfg.aspect_range)
            w = float(np.clip(size * np.sqrt(aspect), 4 / s, 0.9))
            h = float(np.clip(size / np.sqrt(aspect), 4 / s, 0.9))
            cx = rng.uniform(w / 2 + 0.01, 0.99 - w / 2)
            cy = rng.uniform(h / 2 + 0.01, 0.99 - h / 2)
            outline = BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            if any(iou(outline, other) > cfg.max_overlap for other in placed):
                continue
            mask = _shape_mask(kind, cx, cy, w, h, s)
            box = _mask_bbox(mask, s)
            if box is None:
                continue
            image[mask] = color
            gts.append((box, cfg.classes.index(kind) + 1))
            placed.append(outline)
            break

    return Scene(np.clip(image, 0.0, 1.0), tuple(gts), seed)


def drop_labels(
    gts: tuple[tuple[BBox, int], ...], rate: float, seed: int
) -> tuple[tuple[BBox, int], ...]:
    """Remove each label independently with probability ``rate``.

    Pixels are untouched: the objects stay visible, only their labels go
    missing.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng([_DROP_STREAM, seed])
    u = rng.uniform(size=len(gts))
    return tuple(g for g, ui in zip(gts, u) if ui >= rate)


def distort_aspect(scene: Scene, max_factor: float, seed: int) -> Scene:
    """Stretch the scene by a random factor in [1, max_factor] along a random axis.

    The image is stretched about its center and re-rendered at the original
    size; ground-truth boxes follow the same affine map and are clipped to
    the frame. A factor of exactly 1 is the identity.
    """
    if max_factor < 1.0:
        raise ValueError(f"max_factor must be >= 1, got {max_factor}")
    rng = np.random.default_rng([_DISTORT_STREAM, seed])
    factor = float(rng.uniform(1.0, max_factor))
    axis = "x" if rng.integers(2) == 0 else "y"
    if factor == 1.0:
        return replace(scene, image=scene.image.copy())
    image = stretch_axis(scene.image, factor, axis)
    gts = tuple((stretch_box(b, factor, axis), k) for b, k in scene.gts)
    return Scene(image, gts, scene.seed)


# --- dataset files: a directory of PNGs plus a JSONL ground-truth index ----


def image_to_png(image: np.ndarray, path) -> None:
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def image_from_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_dataset(scenes: list[Scene], out_dir) -> list[str]:
    """Write scenes as images/<id>.png plus gt.jsonl; returns the image ids."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    ids, records = [], []
    for i, scene in enumerate(scenes):
        image_id = f"scene{i:05d}"
        image_to_png(scene.image, out_dir / "images" / f"{image_id}.png")
        records.append(
            {
                "image_id": image_id,
                "boxes": [box_to_dict(b, class_id=k) for b, k in scene.gts],
            }
        )
        ids.append(image_id)
    with open(out_dir / "gt.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return ids


def load_dataset(in_dir) -> list[tuple[str, np.ndarray, tuple[tuple[BBox, int], ...]]]:
    """Read a dataset directory back as (image_id, image, gts) triples."""
    in_dir = Path(in_dir)
    gt_path = in_dir / "gt.jsonl"
    if not gt_path.exists():
        raise ValueError(f"missing ground-truth index {gt_path}")
    out = []
    with open(gt_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            image = image_from_png(in_dir / "images" / f"{rec['image_id']}.png")
            gts = tuple(
                (box_from_dict(b), int(b.get("class_id", 0))) for b in rec["boxes"]
            )
            out.append((rec["image_id"], image, gts))
    return out
