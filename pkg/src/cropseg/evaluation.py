"""Pixel-wise and object-wise segmentation metrics.

Label convention: 0 = soil, 1 = weed, 2 = crop.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SOIL, WEED, CROP = 0, 1, 2
CLASS_NAMES = ("soil", "weed", "crop")
VEGETATION = (WEED, CROP)
NUM_CLASSES = 3
# 1 cm^2 minimum object size at 2 mm^2 per pixel
MIN_OBJECT_AREA = 50
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    flat = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(flat, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _ratio(num, den):
    return np.divide(num, den, out=np.full(num.shape, np.nan), where=den > 0)


@dataclass
class PixelMetrics:
    iou: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    miou: float
    undefined: dict[str, list[int]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        def per_class(arr):
            return {name: (None if np.isnan(v) else float(v)) for name, v in zip(CLASS_NAMES, arr)}
        return {"iou": per_class(self.iou), "precision": per_class(self.precision),
                "recall": per_class(self.recall), "miou": self.miou,
                "undefined": self.undefined}


def pixel_metrics(cm: np.ndarray) -> PixelMetrics:
    """IoU, precision and recall per class plus their mean IoU.

    0/0 entries are NaN, listed in ``undefined`` and left out of the mean.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    iou = _ratio(tp, tp + fp + fn)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    undefined = {name: np.flatnonzero(np.isnan(arr)).tolist()
                 for name, arr in (("iou", iou), ("precision", precision), ("recall", recall))
                 if np.isnan(arr).any()}
    miou = float(np.nanmean(iou)) if not np.all(np.isnan(iou)) else float("nan")
    return PixelMetrics(iou, precision, recall, miou, undefined)


@dataclass
class ObjectSet:
    """Connected vegetation components; ``labels`` holds 1-based object ids."""

    labels: np.ndarray
    classes: np.ndarray
    areas: np.ndarray

    def __len__(self) -> int:
        return len(self.classes)

    def pixels(self, k: int) -> np.ndarray:
        return self.labels == k + 1

    def count(self, cls: int) -> int:
        return int(np.count_nonzero(self.classes == cls))


def connected_components(mask: np.ndarray, min_area: int = MIN_OBJECT_AREA) -> ObjectSet:
    """4-connected components of weed and crop separately, dropping those below ``min_area``."""
    mask = np.asarray(mask)
    out = np.zeros(mask.shape, dtype=np.int32)
    classes, areas = [], []
    for cls in VEGETATION:
        lab, n = ndimage.label(mask == cls, structure=FOUR_CONNECTED)
        if n == 0:
            continue
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        for comp in np.flatnonzero(sizes[1:] >= min_area) + 1:
            classes.append(cls)
            areas.append(int(sizes[comp]))
            out[lab == comp] = len(classes)
    return ObjectSet(out, np.array(classes, dtype=np.int64), np.array(areas, dtype=np.int64))


def majority_label(values: np.ndarray) -> int:
    """Most frequent class; any tie for first place counts as soil (a miss)."""
    counts = np.bincount(values.ravel(), minlength=NUM_CLASSES)
    top = counts.max()
    winners = np.flatnonzero(counts == top)
    return int(winners[0]) if len(winners) == 1 else SOIL


def _vote(objects: ObjectSet, other: np.ndarray) -> np.ndarray:
    if len(objects) == 0:
        return np.zeros(0, dtype=np.int64)
    ids = objects.labels.ravel()
    sel = ids > 0
    counts = np.zeros((len(objects) + 1, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (ids[sel], other.ravel()[sel].astype(np.int64)), 1)
    counts = counts[1:]
    top = counts.max(axis=1, keepdims=True)
    unique = (counts == top).sum(axis=1) == 1
    return np.where(unique, counts.argmax(axis=1), SOIL)


@dataclass
class ObjectCounts:
    """Raw object tallies; summing these over images aggregates a dataset."""

    gt_total: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, np.int64))
    gt_correct: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, np.int64))
    pred_total: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, np.int64))
    pred_correct: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, np.int64))

    def __add__(self, other: "ObjectCounts") -> "ObjectCounts":
        return ObjectCounts(self.gt_total + other.gt_total, self.gt_correct + other.gt_correct,
                            self.pred_total + other.pred_total,
                            self.pred_correct + other.pred_correct)


@dataclass
class ObjectMetrics:
    precision: dict[str, float | None]
    recall: dict[str, float | None]
    accuracy: dict[str, float | None]
    macc: float | None
    counts: ObjectCounts

    def as_dict(self) -> dict:
        c = self.counts
        return {"precision": self.precision, "recall": self.recall, "accuracy": self.accuracy,
                "macc": self.macc,
                "counts": {name: {"gt": int(c.gt_total[k]), "gt_correct": int(c.gt_correct[k]),
                                  "pred": int(c.pred_total[k]),
                                  "pred_correct": int(c.pred_correct[k])}
                           for k, name in enumerate(CLASS_NAMES) if k in VEGETATION}}


def object_counts(pred: np.ndarray, gt: np.ndarray, min_area: int = MIN_OBJECT_AREA) -> ObjectCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    counts = ObjectCounts()
    gt_obj = connected_components(gt, min_area)
    pred_obj = connected_components(pred, min_area)
    gt_vote = _vote(gt_obj, pred)
    pred_vote = _vote(pred_obj, gt)
    for cls in VEGETATION:
        sel = gt_obj.classes == cls
        counts.gt_total[cls] = sel.sum()
        counts.gt_correct[cls] = np.sum(gt_vote[sel] == cls)
        sel = pred_obj.classes == cls
        counts.pred_total[cls] = sel.sum()
        counts.pred_correct[cls] = np.sum(pred_vote[sel] == cls)
    return counts


def summarize_objects(counts: ObjectCounts) -> ObjectMetrics:
    """Per-class precision/recall and the weed/crop mean accuracy.

    A class's object accuracy is the share of its ground-truth objects whose
    predicted majority label is correct; classes without objects are skipped.
    """
    def frac(num, den):
        return float(num) / float(den) if den > 0 else None

    precision, recall = {}, {}
    for cls in VEGETATION:
        name = CLASS_NAMES[cls]
        precision[name] = frac(counts.pred_correct[cls], counts.pred_total[cls])
        recall[name] = frac(counts.gt_correct[cls], counts.gt_total[cls])
    accuracy = dict(recall)
    defined = [v for v in accuracy.values() if v is not None]
    macc = float(np.mean(defined)) if defined else None
    return ObjectMetrics(precision, recall, accuracy, macc, counts)


def object_metrics(pred: np.ndarray, gt: np.ndarray, min_area: int = MIN_OBJECT_AREA) -> ObjectMetrics:
    return summarize_objects(object_counts(pred, gt, min_area))


@dataclass
class MetricsReport:
    pixel: PixelMetrics
    objects: ObjectMetrics
    confusion: np.ndarray
    images: int

    def as_dict(self) -> dict:
        return {"images": self.images, "confusion": self.confusion.tolist(),
                "pixel": self.pixel.as_dict(), "object": self.objects.as_dict()}

    def table(self) -> str:
        def pct(v):
            return "   -  " if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100 * v:6.2f}"

        p = self.pixel
        lines = [
            "Pixel-wise",
            f"{'mIoU':>7} | {'IoU soil':>8} {'weeds':>6} {'crops':>6} | "
            f"{'P soil':>6} {'weeds':>6} {'crops':>6} | {'R soil':>6} {'weeds':>6} {'crops':>6}",
            f"{pct(p.miou):>7} | {pct(p.iou[0]):>8} {pct(p.iou[1])} {pct(p.iou[2])} | "
            f"{pct(p.precision[0])} {pct(p.precision[1])} {pct(p.precision[2])} | "
            f"{pct(p.recall[0])} {pct(p.recall[1])} {pct(p.recall[2])}",
            "",
            "Object-wise",
            f"{'mAcc':>7} | {'P weeds':>7} {'crops':>6} | {'R weeds':>7} {'crops':>6}",
        ]
        o = self.objects
        lines.append(f"{pct(o.macc):>7} | {pct(o.precision['weed']):>7} {pct(o.precision['crop'])} | "
                     f"{pct(o.recall['weed']):>7} {pct(o.recall['crop'])}")
        return "\n".join(lines)


def evaluate(pairs, min_area: int = MIN_OBJECT_AREA) -> MetricsReport:
    """Aggregate metrics over an iterable of ``(pred, gt)`` mask pairs."""
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    counts = ObjectCounts()
    n = 0
    for pred, gt in pairs:
        cm += confusion_matrix(gt, pred)
        counts = counts + object_counts(pred, gt, min_area)
        n += 1
    if n == 0:
        raise ValueError("no masks to evaluate")
    return MetricsReport(pixel_metrics(cm), summarize_objects(counts), cm, n)
