"""Detection decoding, PASCAL-style AP, bias statistics and report files."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .blockworld import CLASS_NAMES, GRID, NUM_CLASSES
from .boxes import clip_boxes, decode, iou_matrix


class EvalError(ValueError):
    pass


class CorrelationError(EvalError):
    pass


class DegenerateFitError(EvalError):
    pass


@dataclass
class Detection:
    class_index: int
    score: float
    bbox: tuple[float, float, float, float]


# ---------------------------------------------------------------------------
# decoding

def nms(boxes, scores, iou_thresh: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression; indices kept, highest score first.

    Equal scores keep their input order.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    order = list(np.argsort(-np.asarray(scores, dtype=float), kind="stable"))
    keep = []
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] >= iou_thresh
    return keep


def decode_detections(scores, deltas, anchors, score_thresh: float = 0.05, nms_iou: float = 0.5,
                      max_dets: int = 100, pre_nms: int = 1000, image_size=None) -> list[Detection]:
    """Scored boxes from flattened head outputs of one image.

    ``scores`` is (N, K) probabilities, ``deltas`` (N, 4) and ``anchors``
    (N, 4).  Every (anchor, class) pair above ``score_thresh`` is a
    candidate; the ``pre_nms`` best are decoded, suppressed per class and the
    ``max_dets`` best survivors returned sorted by score.
    """
    scores = np.asarray(scores, dtype=float)
    anchor_idx, cls_idx = np.nonzero(scores > score_thresh)
    if len(anchor_idx) == 0:
        return []
    cand = scores[anchor_idx, cls_idx]
    if len(cand) > pre_nms:
        top = np.argsort(-cand, kind="stable")[:pre_nms]
        anchor_idx, cls_idx, cand = anchor_idx[top], cls_idx[top], cand[top]
    boxes = decode(np.asarray(deltas)[anchor_idx], np.asarray(anchors)[anchor_idx])
    if image_size is not None:
        boxes = clip_boxes(boxes, *image_size)
    dets = []
    for k in np.unique(cls_idx):
        sel = np.flatnonzero(cls_idx == k)
        valid = sel[(boxes[sel, 2] > boxes[sel, 0]) & (boxes[sel, 3] > boxes[sel, 1])]
        for j in nms(boxes[valid], cand[valid], nms_iou):
            i = valid[j]
            dets.append(Detection(int(k), float(cand[i]), tuple(float(v) for v in boxes[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_dets]


# ---------------------------------------------------------------------------
# average precision

def ap_from_pr(recall, precision, mode: str = "all") -> float:
    """Area under the precision envelope (``all``) or 11-point VOC07 AP."""
    recall = np.asarray(recall, dtype=float)
    precision = np.asarray(precision, dtype=float)
    if mode == "11pt":
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0
                              for t in np.linspace(0, 1, 11)]))
    if mode != "all":
        raise EvalError(f"unknown AP mode {mode!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_detections(detections: Sequence[tuple], ground_truths: Mapping, iou_thresh: float = 0.5):
    """Mark detections of one class as true/false positives.

    ``detections`` are ``(image_id, score, box)``; ``ground_truths`` maps
    image id to a list of boxes.  Detections are visited by descending score;
    each claims its highest-IoU box if that box is still free and the IoU
    reaches ``iou_thresh``.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    taken = {img: np.zeros(len(b), dtype=bool) for img, b in ground_truths.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = detections[i]
        gts = ground_truths.get(img, [])
        if len(gts) == 0:
            continue
        ious = iou_matrix([box], gts)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh and not taken[img][j]:
            taken[img][j] = True
            tp[rank] = 1.0
    return tp


def average_precision(detections: Sequence[tuple], ground_truths: Mapping, iou_thresh: float = 0.5,
                      mode: str = "all") -> float | None:
    """AP of one class, or None when the class has no ground truth."""
    n_gt = sum(len(b) for b in ground_truths.values())
    if n_gt == 0:
        return None
    if not detections:
        return 0.0
    tp = match_detections(detections, ground_truths, iou_thresh)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    return ap_from_pr(ctp / n_gt, ctp / np.maximum(ctp + cfp, np.finfo(float).eps), mode)


@dataclass
class ImageResult:
    """Detections and ground truth for one evaluated image."""

    detections: list[Detection]
    gt_boxes: list[tuple]
    gt_classes: list[int]
    gt_cells: list[tuple] = field(default_factory=list)


def class_aps(results: Sequence[ImageResult], iou_thresh: float = 0.5, mode: str = "all",
              num_classes: int = NUM_CLASSES) -> np.ndarray:
    """AP per class; NaN for classes without ground truth."""
    dets = defaultdict(list)
    gts = defaultdict(dict)
    for img, r in enumerate(results):
        for d in r.detections:
            dets[d.class_index].append((img, d.score, d.bbox))
        for box, k in zip(r.gt_boxes, r.gt_classes):
            gts[k].setdefault(img, []).append(box)
    out = np.full(num_classes, np.nan)
    for k in range(num_classes):
        ap = average_precision(dets[k], gts[k], iou_thresh, mode)
        if ap is not None:
            out[k] = ap
    return out


def mean_ap(aps) -> float:
    aps = np.asarray(aps, dtype=float)
    if np.all(np.isnan(aps)):
        return float("nan")
    return float(np.nanmean(aps))


def cell_maps(results: Sequence[ImageResult], iou_thresh: float = 0.5, mode: str = "all"):
    """mAP per (x, y) board cell and the instance count behind each.

    Ground truth is binned by its cell.  A detection goes to the cell of the
    ground-truth box it overlaps most (any class); detections overlapping no
    box are dropped.  Cells without instances are NaN.
    """
    binned: dict[tuple[int, int], list[ImageResult]] = defaultdict(list)
    counts = np.zeros((GRID, GRID), dtype=int)
    for r in results:
        per_cell: dict[tuple[int, int], ImageResult] = {}
        for box, k, cell in zip(r.gt_boxes, r.gt_classes, r.gt_cells):
            key = (cell[0], cell[1])
            res = per_cell.setdefault(key, ImageResult([], [], []))
            res.gt_boxes.append(box)
            res.gt_classes.append(k)
            counts[key] += 1
        if r.gt_boxes and r.detections:
            ious = iou_matrix([d.bbox for d in r.detections], r.gt_boxes)
            for d, row in zip(r.detections, ious):
                j = int(np.argmax(row))
                if row[j] > 0:
                    cell = r.gt_cells[j]
                    per_cell[(cell[0], cell[1])].detections.append(d)
        for key, res in per_cell.items():
            binned[key].append(res)
    grid = np.full((GRID, GRID), np.nan)
    for key, res in binned.items():
        grid[key] = mean_ap(class_aps(res, iou_thresh, mode))
    return grid, counts


# ---------------------------------------------------------------------------
# model-driven evaluation

def predict(model, sample, min_visible: float = 0.05, **decode_kw):
    """Run the network on one sample; returns (ImageResult, joints)."""
    import torch

    from .model import image_tensor, token_tensor

    image = sample.load_image()
    x = image_tensor(image)
    h, w, _ = image.shape
    with torch.no_grad():
        out = model(x, token_tensor(sample.goal_tokens))
    anchors = model.anchors((x.shape[3], x.shape[2]))
    dets = decode_detections(out["cls"][0].numpy(), out["box"][0].numpy(), anchors,
                             image_size=(w, h), **decode_kw)
    gt = sample.gt_objects(min_visible)
    result = ImageResult(dets, [o.bbox for o in gt], [o.class_index for o in gt], [o.cell for o in gt])
    return result, out["joints"][0].numpy().astype(float)


def evaluate_model(model, samples, min_visible: float = 0.05, **decode_kw):
    was_training = model.training
    model.eval()
    try:
        pairs = [predict(model, s, min_visible, **decode_kw) for s in samples]
    finally:
        model.train(was_training)
    return [p[0] for p in pairs], np.array([p[1] for p in pairs])


def map_per_class(model, samples, iou_thresh: float = 0.5, mode: str = "all"):
    """Per-class AP (16, NaN where absent) and their mean."""
    results, _ = evaluate_model(model, samples)
    aps = class_aps(results, iou_thresh, mode)
    return aps, mean_ap(aps)


def map_per_cell(model, samples, iou_thresh: float = 0.5, mode: str = "all"):
    results, _ = evaluate_model(model, samples)
    return cell_maps(results, iou_thresh, mode)


def visuomotor_eval(model: Callable | object, samples) -> dict:
    """Per-sample visuomotor MSE with its mean and standard deviation.

    ``model`` is either the network or any callable mapping a sample to six
    predicted normalized joint values.
    """
    if hasattr(model, "visuomotor"):
        _, preds = evaluate_model(model, samples)
    else:
        preds = np.array([np.asarray(model(s), dtype=float) for s in samples])
    targets = np.array([s.target.joints for s in samples], dtype=float)
    per = np.mean((preds - targets) ** 2, axis=1)
    return {"mse": float(per.mean()), "std": float(per.std()), "per_sample": per.tolist()}


# ---------------------------------------------------------------------------
# bias statistics

def pearson(x, y) -> dict:
    """Product-moment r with a two-sided p from Student's t (n - 2 dof)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n != len(y):
        raise EvalError("x and y differ in length")
    if n < 3:
        raise CorrelationError("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise CorrelationError("zero variance: correlation undefined")
    r = float(np.clip(np.dot(dx, dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1 - r * r))
        p = float(2 * stats.t.sf(abs(t), n - 2))
    return {"r": r, "p": p, "n": n}


def quadratic_trend(x, y) -> np.ndarray:
    """Least-squares ``(a, b, c)`` of ``y ~ a + b x + c x^2``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise DegenerateFitError("need at least 3 points")
    A = np.stack([np.ones_like(x), x, x * x], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < 3:
        raise DegenerateFitError("design matrix is rank deficient (fewer than 3 distinct x)")
    return coef


def low_density_cells(counts, fraction: float = 0.5) -> np.ndarray:
    """Boolean 8x8 mask of the least-populated ``fraction`` of cells.

    Ties are broken by flat cell index ``x * 8 + y`` ascending.
    """
    flat = np.asarray(counts).reshape(-1)
    k = int(round(fraction * flat.size))
    order = np.lexsort((np.arange(flat.size), flat))
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(np.shape(counts))


@dataclass
class BiasReport:
    class_ap: np.ndarray
    cell_map: np.ndarray
    class_counts: np.ndarray
    cell_counts: np.ndarray
    pearson: dict | None
    quadratic: np.ndarray | None
    low_density: np.ndarray

    @property
    def mean_ap(self) -> float:
        return mean_ap(self.class_ap)


def analyze_bias(class_ap, cell_map, class_counts, cell_counts) -> BiasReport:
    """Correlate per-cell mAP with per-cell instance counts."""
    cell_map = np.asarray(cell_map, dtype=float)
    cell_counts = np.asarray(cell_counts)
    have = ~np.isnan(cell_map)
    x, y = cell_counts[have].astype(float), cell_map[have]
    try:
        corr = pearson(x, y)
    except CorrelationError:
        corr = None
    try:
        quad = quadratic_trend(x, y)
    except DegenerateFitError:
        quad = None
    return BiasReport(np.asarray(class_ap, dtype=float), cell_map, np.asarray(class_counts), cell_counts,
                      corr, quad, low_density_cells(cell_counts))


# ---------------------------------------------------------------------------
# reports
#
# class_ap.csv      class_index,class_name,instances,ap
# cell_map.csv      x,y,instances,map,low_density
# ablation.csv      combination,mse_mean,mse_std,fl_mean,fl_std,sl1_mean,sl1_std,trials
# bias.json         pearson and quadratic fit

CLASS_AP_FIELDS = ("class_index", "class_name", "instances", "ap")
CELL_FIELDS = ("x", "y", "instances", "map", "low_density")
ABLATION_FIELDS = ("combination", "mse_mean", "mse_std", "fl_mean", "fl_std", "sl1_mean", "sl1_std", "trials")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(f)) for f in fields])


def read_csv(path) -> list[dict]:
    """Rows as dicts; numeric strings become floats, empty cells None."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                    continue
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
            out.append(parsed)
    return out


def emit_report(bias: BiasReport | None, out_dir, ablation_rows: Sequence[dict] = (),
                loss_curves: Mapping[str, Sequence[float]] | None = None, plots: bool = True) -> list[Path]:
    """Write CSV tables, a JSON summary and PNG plots; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    class_rows, cell_rows = [], []
    if bias is not None:
        for k in range(NUM_CLASSES):
            class_rows.append({"class_index": k, "class_name": CLASS_NAMES[k],
                               "instances": int(bias.class_counts[k]), "ap": float(bias.class_ap[k])})
        for x in range(GRID):
            for y in range(GRID):
                cell_rows.append({"x": x, "y": y, "instances": int(bias.cell_counts[x, y]),
                                  "map": float(bias.cell_map[x, y]),
                                  "low_density": int(bias.low_density[x, y])})
    write_csv(out / "class_ap.csv", CLASS_AP_FIELDS, class_rows)
    write_csv(out / "cell_map.csv", CELL_FIELDS, cell_rows)
    write_csv(out / "ablation.csv", ABLATION_FIELDS, ablation_rows)
    written += [out / "class_ap.csv", out / "cell_map.csv", out / "ablation.csv"]
    if bias is not None:
        summary = {"mean_ap": bias.mean_ap, "pearson": bias.pearson,
                   "quadratic": None if bias.quadratic is None else bias.quadratic.tolist(),
                   "low_density_cells": int(bias.low_density.sum())}
        (out / "bias.json").write_text(json.dumps(summary, indent=2))
        written.append(out / "bias.json")
    if plots:
        written += _plots(bias, out, loss_curves or {})
    return written


def _plots(bias, out: Path, loss_curves) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    if bias is not None:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
        for ax, data, title in ((axes[0], bias.cell_counts.astype(float), "instances"),
                                (axes[1], bias.cell_map, "mAP")):
            im = ax.imshow(np.ma.masked_invalid(data.T), origin="lower", cmap="viridis")
            ax.set_title(title)
            ax.set_xlabel("x")
            ax.set_ylabel("y")
            for x in range(GRID):
                for y in range(GRID):
                    v = data[x, y]
                    ax.text(x, y, "-" if np.isnan(v) else (f"{v:.2f}" if title == "mAP" else f"{int(v)}"),
                            ha="center", va="center", fontsize=6, color="w")
            fig.colorbar(im, ax=ax, shrink=0.8)
        fig.tight_layout()
        fig.savefig(out / "cell_heatmaps.png", dpi=100)
        plt.close(fig)
        paths.append(out / "cell_heatmaps.png")

        have = ~np.isnan(bias.cell_map)
        fig, ax = plt.subplots(figsize=(5, 4))
        x = bias.cell_counts[have].astype(float)
        ax.plot(x, bias.cell_map[have], "+", color="tab:blue")
        if bias.quadratic is not None and len(x):
            xs = np.linspace(x.min(), x.max(), 100)
            a, b, c = bias.quadratic
            ax.plot(xs, a + b * xs + c * xs * xs, color="tab:blue")
        if bias.pearson:
            ax.set_title(f"r({bias.pearson['n']})={bias.pearson['r']:.4f}, p={bias.pearson['p']:.3g}")
        ax.set_xlabel("instances per cell")
        ax.set_ylabel("mAP")
        fig.tight_layout()
        fig.savefig(out / "instances_vs_map.png", dpi=100)
        plt.close(fig)
        paths.append(out / "instances_vs_map.png")
    if loss_curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, values in loss_curves.items():
            ax.plot(values, label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", dpi=100)
        plt.close(fig)
        paths.append(out / "loss_curves.png")
    return paths
