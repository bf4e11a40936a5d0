"""Anchor target assignment and the three task losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .boxes import encode, iou_matrix

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.4
CLAMP = 1e-7

IGNORE = -2
NEGATIVE = -1


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0
    balanced: bool = False  # weight negatives by 1 - alpha instead of alpha

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass(frozen=True)
class CombinedLossWeights:
    """Scaling of the localization, classification and visuomotor terms."""

    localization: float = 1.0
    classification: float = 1.0
    visuomotor: float = 1.0
    mask: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        if min(self.localization, self.classification, self.visuomotor) < 0:
            raise ValueError("loss weights must be non-negative")
        object.__setattr__(self, "mask", tuple(bool(m) for m in self.mask))

    @property
    def active_tasks(self) -> tuple[str, ...]:
        return tuple(t for t, on in zip(("box", "cls", "vis"), self.mask) if on)

    @classmethod
    def for_tasks(cls, tasks, **weights) -> "CombinedLossWeights":
        tasks = set(tasks)
        unknown = tasks - {"box", "cls", "vis"}
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        return cls(mask=("box" in tasks, "cls" in tasks, "vis" in tasks), **weights)


@dataclass
class AnchorTargets:
    """Per-anchor state: class index for positives, NEGATIVE or IGNORE."""

    labels: np.ndarray               # (N,) int
    matched: np.ndarray              # (N,) gt index for positives, -1 otherwise
    deltas: np.ndarray               # (N, 4), zero for non-positives
    max_iou: np.ndarray = field(repr=False, default=None)

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(anchors, gt_boxes, gt_classes, pos_iou: float = POSITIVE_IOU,
                   neg_iou: float = NEGATIVE_IOU) -> AnchorTargets:
    """Label anchors by their best IoU with any ground-truth box.

    ``>= pos_iou`` is positive (matched to the argmax box, lowest index on
    ties), ``< neg_iou`` is negative, anything between is ignored.
    """
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 4)
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=int).reshape(-1)
    if len(gt_boxes) == 0:
        return AnchorTargets(np.full(n, NEGATIVE), np.full(n, -1), np.zeros((n, 4)), np.zeros(n))
    overlaps = iou_matrix(anchors, gt_boxes)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best]
    labels = np.full(n, IGNORE)
    labels[best_iou < neg_iou] = NEGATIVE
    pos = best_iou >= pos_iou
    labels[pos] = gt_classes[best[pos]]
    deltas = np.zeros((n, 4))
    if pos.any():
        deltas[pos] = encode(gt_boxes[best[pos]], anchors[pos])
    matched = np.where(pos, best, -1)
    return AnchorTargets(labels, matched, deltas, best_iou)


def focal_loss(p, y, params: FocalParams = FocalParams()):
    """Element-wise focal loss ``-alpha (1 - p_t)^gamma log(p_t)``.

    ``p_t`` is ``p`` where ``y = 1`` and ``1 - p`` elsewhere.  With
    ``params.balanced`` negatives are weighted by ``1 - alpha`` instead.
    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    p = torch.as_tensor(p).clamp(CLAMP, 1 - CLAMP)
    y = torch.as_tensor(y, dtype=p.dtype)
    p_t = torch.where(y > 0.5, p, 1 - p)
    alpha = params.alpha
    if params.balanced:
        alpha = torch.where(y > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1 - alpha))
    return -alpha * (1 - p_t) ** params.gamma * torch.log(p_t)


def classification_loss(scores: torch.Tensor, labels, params: FocalParams = FocalParams()) -> torch.Tensor:
    """Focal loss summed over non-ignored anchors, divided by the positive count.

    ``scores`` is (N, K) probabilities for one image, ``labels`` (N,) as
    produced by :func:`assign_targets`.
    """
    labels = torch.as_tensor(labels, device=scores.device)
    keep = labels != IGNORE
    onehot = torch.zeros_like(scores)
    pos = labels >= 0
    onehot[pos, labels[pos]] = 1.0
    n_pos = max(int(pos.sum()), 1)
    return focal_loss(scores[keep], onehot[keep], params).sum() / n_pos


def smooth_l1(x):
    """Element-wise smooth L1: ``0.5 x^2`` for ``|x| < 1``, else ``|x| - 0.5``."""
    x = torch.as_tensor(x)
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def regression_loss(pred: torch.Tensor, target, labels) -> torch.Tensor:
    """Smooth L1 over positive anchors, summed over the 4 deltas, averaged per anchor."""
    labels = torch.as_tensor(labels, device=pred.device)
    pos = labels >= 0
    if not pos.any():
        return pred.sum() * 0.0
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    return smooth_l1(pred[pos] - target[pos]).sum() / int(pos.sum())


def visuomotor_mse(pred, target) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    return ((pred - target) ** 2).mean()


def combined_loss(sl1, fl, mse, weights: CombinedLossWeights = CombinedLossWeights()):
    """Weighted sum of the three task losses; masked tasks contribute exactly 0.

    Any term may be ``None`` when its task is masked.  Returns ``(total,
    breakdown)`` where the breakdown maps ``sl1``/``fl``/``mse`` to the raw
    (unweighted) floats of the active terms.
    """
    terms = (("sl1", sl1, weights.localization, weights.mask[0]),
             ("fl", fl, weights.classification, weights.mask[1]),
             ("mse", mse, weights.visuomotor, weights.mask[2]))
    total, breakdown = None, {}
    for name, value, lam, on in terms:
        if not on:
            continue
        if value is None:
            raise ValueError(f"{name} is active but missing")
        value = torch.as_tensor(value)
        if torch.any(value < 0):
            raise ValueError(f"{name} is negative")
        breakdown[name] = float(value.detach())
        total = lam * value if total is None else total + lam * value
    if total is None:
        total = torch.zeros(())
    return total, breakdown
