"""Boxes, anchors, IoU and the center/size delta encoding.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel coordinates.
"""
from __future__ import annotations

import math

import numpy as np

STRIDES = (8, 16, 32, 64, 128)
SCALES = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
RATIOS = (0.5, 1.0, 2.0)
# dividing deltas by these keeps regression targets near unit scale
DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_MAX_LOG = math.log(1000.0 / 16)


class BoxError(ValueError):
    pass


def area(box) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def iou(a, b) -> float:
    """Intersection over union of two boxes; zero-area boxes are rejected."""
    if area(a) <= 0 or area(b) <= 0:
        raise BoxError(f"degenerate box in iou: {a}, {b}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area(a) + area(b) - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def generate_anchors(image_size, levels: int = 5, strides=STRIDES, scales=SCALES, ratios=RATIOS,
                     size_factor: float = 4.0):
    """Anchors for every pyramid level, ordered level, row, column, shape.

    ``image_size`` is ``(width, height)`` of the network input.  Returns the
    ``(N, 4)`` boxes and the ``(N,)`` level index of each.  A level with
    stride ``s`` has ``ceil(H/s) * ceil(W/s)`` locations centred at
    ``(i + 0.5) * s``, each carrying ``len(scales) * len(ratios)`` boxes of
    base size ``size_factor * s``.
    """
    w, h = image_size
    strides = tuple(strides)[:levels]
    if len(strides) != levels:
        raise BoxError("need one stride per level")
    if min(w, h) < max(strides):
        raise BoxError(f"image {w}x{h} smaller than the largest stride")
    boxes, level_ids = [], []
    for lvl, s in enumerate(strides):
        base = size_factor * s
        shapes = []
        for r in ratios:
            for sc in scales:
                size = base * sc
                # ratio = height / width at constant area
                bw_, bh_ = size / math.sqrt(r), size * math.sqrt(r)
                shapes.append((bw_, bh_))
        shapes = np.array(shapes)
        ny, nx = math.ceil(h / s), math.ceil(w / s)
        cy, cx = np.meshgrid((np.arange(ny) + 0.5) * s, (np.arange(nx) + 0.5) * s, indexing="ij")
        c = np.stack([cx.ravel(), cy.ravel()], axis=1)
        half = shapes / 2
        lvl_boxes = np.concatenate([c[:, None, :] - half[None], c[:, None, :] + half[None]], axis=2)
        boxes.append(lvl_boxes.reshape(-1, 4))
        level_ids.append(np.full(len(boxes[-1]), lvl))
    return np.concatenate(boxes), np.concatenate(level_ids)


def anchor_count(image_size, levels: int = 5, strides=STRIDES, per_location: int = 9) -> int:
    w, h = image_size
    return sum(math.ceil(h / s) * math.ceil(w / s) * per_location for s in strides[:levels])


def encode(boxes, anchors, weights=DELTA_WEIGHTS) -> np.ndarray:
    """Deltas ``(dx, dy, dw, dh)`` taking ``anchors`` onto ``boxes``."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 4)
    a = np.asarray(anchors, dtype=float).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    ax, ay = a[:, 0] + aw / 2, a[:, 1] + ah / 2
    bw_, bh_ = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    bx, by = b[:, 0] + bw_ / 2, b[:, 1] + bh_ / 2
    wx, wy, ww, wh = weights
    return np.stack([wx * (bx - ax) / aw, wy * (by - ay) / ah,
                     ww * np.log(bw_ / aw), wh * np.log(bh_ / ah)], axis=1)


def decode(deltas, anchors, weights=DELTA_WEIGHTS) -> np.ndarray:
    d = np.asarray(deltas, dtype=float).reshape(-1, 4)
    a = np.asarray(anchors, dtype=float).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    ax, ay = a[:, 0] + aw / 2, a[:, 1] + ah / 2
    wx, wy, ww, wh = weights
    cx = ax + d[:, 0] / wx * aw
    cy = ay + d[:, 1] / wy * ah
    w = aw * np.exp(np.minimum(d[:, 2] / ww, _MAX_LOG))
    h = ah * np.exp(np.minimum(d[:, 3] / wh, _MAX_LOG))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_boxes(boxes, width, height) -> np.ndarray:
    b = np.array(boxes, dtype=float).reshape(-1, 4)
    b[:, [0, 2]] = b[:, [0, 2]].clip(0, width)
    b[:, [1, 3]] = b[:, [1, 3]].clip(0, height)
    return b
