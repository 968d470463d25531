"""Training loops: SGD with momentum over the matching objective.

One trainer owns the weights; batches are drawn from a seeded generator so
a fixed seed reproduces the loss trace bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import BBox, iou_matrix
from ..imageops import sample_window
from ..matching_loss import LossConfig, best_matching, bootstrap_conf_loss, multibox_loss
from ..priors import PriorSet
from .layers import sigmoid, softmax_cross_entropy
from .nets import PostClassifierNet, ProposerNet

_BATCH_STREAM = 11
_SAMPLER_STREAM = 13


@dataclass(frozen=True)
class TrainStep:
    step: int
    f_conf: float
    f_loc: float
    f_total: float


class SGDMomentum:
    def __init__(self, params: list[np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p -= self.lr * v


def _zero_like(params):
    return [np.zeros_like(p) for p in params]


def _accumulate(acc, grads, scale):
    for a, g in zip(acc, grads):
        a += scale * g


def train_proposer(
    net: ProposerNet,
    dataset: list[tuple[np.ndarray, np.ndarray]],
    priors: PriorSet,
    cfg: LossConfig,
    steps: int,
    lr: float = 1e-3,
    momentum: float = 0.9,
    batch_size: int = 4,
    seed: int = 0,
    exact_matching: bool = True,
) -> list[TrainStep]:
    """SGD over (image, gt boxes) pairs.

    Per image: forward, add residuals to priors to form candidate boxes,
    solve the matching, evaluate the objective (bootstrapped when the
    config's L > 0) and backpropagate its closed-form slot gradients.
    Aborts with a diagnostic on non-finite loss.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    if net.config.n_slots != len(priors):
        raise ValueError(
            f"net emits {net.config.n_slots} slots but prior set has {len(priors)}"
        )
    rng = np.random.default_rng([_BATCH_STREAM, seed])
    opt = SGDMomentum(net.params, lr=lr, momentum=momentum)
    log: list[TrainStep] = []

    for step in range(steps):
        idxs = rng.integers(0, len(dataset), size=batch_size)
        acc = _zero_like(net.params)
        f_conf = f_loc = f_total = 0.0
        for i in idxs:
            image, gts = dataset[i]
            preds, cache = net.forward(image)
            boxes = preds.residuals + priors.boxes
            conf = sigmoid(preds.logits)
            matching = best_matching(boxes, conf, gts, cfg, exact=exact_matching)
            bundle = multibox_loss(boxes, conf, gts, matching, cfg)
            grad_logits = bundle.grad_logits
            conf_value = bundle.f_conf
            if cfg.bootstrap_l > 0:
                conf_value, grad_logits = bootstrap_conf_loss(conf, matching, cfg.bootstrap_l)
            total = conf_value + cfg.alpha * bundle.f_loc
            if not np.isfinite(total):
                raise RuntimeError(
                    f"diverged at step {step}: loss={total} (image index {i})"
                )
            grads = net.backward(cache, bundle.grad_locs, grad_logits)
            _accumulate(acc, grads, 1.0 / batch_size)
            f_conf += conf_value / batch_size
            f_loc += bundle.f_loc / batch_size
            f_total += total / batch_size
        opt.step(acc)
        log.append(TrainStep(step, f_conf, f_loc, f_total))
    return log


# --- post-classifier training ----------------------------------------------


@dataclass(frozen=True)
class CropSample:
    crop: np.ndarray
    label: int  # 0 = background
    context: np.ndarray | None = None


def label_crop(box: BBox, gts: tuple[tuple[BBox, int], ...], iou_threshold: float = 0.5) -> int:
    """Class of the best-overlapping ground truth at IoU >= 0.5, else background."""
    if not gts:
        return 0
    overlaps = iou_matrix(box.as_array()[None, :], np.stack([g.as_array() for g, _ in gts]))[0]
    j = int(np.argmax(overlaps))
    return gts[j][1] if overlaps[j] >= iou_threshold else 0


def build_crop_samples(
    images: list[np.ndarray],
    proposals_per_image: list[list[BBox]],
    gts_per_image: list[tuple[tuple[BBox, int], ...]],
    crop_size: int,
    context_fn=None,
) -> tuple[list[CropSample], list[CropSample]]:
    """Split proposal crops into positives and negatives by the IoU 0.5 rule.

    ``context_fn(image) -> vector`` supplies a per-image context feature
    (evaluated once per image); None trains without context.
    """
    positives, negatives = [], []
    for image, proposals, gts in zip(images, proposals_per_image, gts_per_image):
        ctx = context_fn(image) if context_fn is not None else None
        for box in proposals:
            if box.area() <= 0:
                continue
            crop = sample_window(image, box, crop_size, crop_size)
            sample = CropSample(crop, label_crop(box, gts), ctx)
            (positives if sample.label > 0 else negatives).append(sample)
    return positives, negatives


def sample_training_batch(
    rng: np.random.Generator,
    positives: list[CropSample],
    negatives: list[CropSample],
    neg_ratio: float,
    batch_size: int,
) -> list[CropSample]:
    """Draw a batch with each slot negative with probability r/(1+r)."""
    p_neg = neg_ratio / (1.0 + neg_ratio)
    batch = []
    for _ in range(batch_size):
        pool = negatives if rng.uniform() < p_neg else positives
        batch.append(pool[int(rng.integers(len(pool)))])
    return batch


def train_postclassifier(
    net: PostClassifierNet,
    positives: list[CropSample],
    negatives: list[CropSample],
    steps: int,
    neg_ratio: float = 7.0,
    lr: float = 5e-3,
    momentum: float = 0.9,
    batch_size: int = 16,
    seed: int = 0,
) -> list[TrainStep]:
    """Cross-entropy training of the crop classifier at a fixed negative ratio."""
    if not positives or not negatives:
        raise ValueError("need both positive and negative samples")
    rng = np.random.default_rng([_SAMPLER_STREAM, seed])
    opt = SGDMomentum(net.params, lr=lr, momentum=momentum)
    log: list[TrainStep] = []
    for step in range(steps):
        batch = sample_training_batch(rng, positives, negatives, neg_ratio, batch_size)
        acc = _zero_like(net.params)
        total = 0.0
        for sample in batch:
            probs, cache = net.forward(sample.crop, sample.context)
            loss, _, dlogits = softmax_cross_entropy(cache["cls"]["logits"], sample.label)
            total += loss / batch_size
            grads = net.backward(dlogits, cache)
            _accumulate(acc, grads, 1.0 / batch_size)
        if not np.isfinite(total):
            raise RuntimeError(f"diverged at step {step}: loss={total}")
        opt.step(acc)
        log.append(TrainStep(step, total, 0.0, total))
    return log


def write_loss_csv(path, log: list[TrainStep]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,f_conf,f_loc,f_total\n")
        for row in log:
            fh.write(f"{row.step},{row.f_conf!r},{row.f_loc!r},{row.f_total!r}\n")
