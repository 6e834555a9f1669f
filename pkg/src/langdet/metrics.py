"""VOC-style average precision with continuous interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import box_iou


@dataclass
class ImageRecord:
    """Per-image matching outcome, enough to recompute AP over any image subset."""

    image_id: int
    labels: np.ndarray  # detection labels
    scores: np.ndarray
    true_positive: np.ndarray  # bool per detection
    gt_counts: dict  # class -> number of ground-truth objects


def match_image(image_id: int, boxes, scores, labels, gt_boxes, gt_labels,
                iou_threshold: float) -> ImageRecord:
    """Greedy, confidence-ordered matching; each ground truth is claimed at most once.

    A detection is a true positive when IoU >= threshold with an unclaimed ground truth
    of its class (the best-overlapping one of that class).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(scores), dtype=bool)
    claimed = np.zeros(len(gt_labels), dtype=bool)
    iou = box_iou(boxes, gt_boxes) if len(gt_labels) and len(scores) else np.zeros((len(scores), 0))
    for d in order:
        same = np.nonzero(gt_labels == labels[d])[0]
        if same.size == 0:
            continue
        best = same[np.argmax(iou[d, same])]
        if iou[d, best] >= iou_threshold and not claimed[best]:
            claimed[best] = True
            tp[d] = True
    counts = {int(c): int((gt_labels == c).sum()) for c in np.unique(gt_labels)}
    return ImageRecord(image_id, labels, scores, tp, counts)


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def class_ap(records: list[ImageRecord], cls: int) -> float:
    """AP for one class; NaN when the records hold no ground truth of that class."""
    npos = sum(r.gt_counts.get(cls, 0) for r in records)
    if npos == 0:
        return float("nan")
    scores, tps = [], []
    for r in records:
        sel = r.labels == cls
        scores.append(r.scores[sel])
        tps.append(r.true_positive[sel])
    scores = np.concatenate(scores) if scores else np.zeros(0)
    tps = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(~tps[order])
    return voc_ap(tp / npos, tp / np.maximum(tp + fp, np.finfo(np.float64).eps))


def ap_from_records(records: list[ImageRecord], num_classes: int | None = None) -> float:
    """Mean AP over classes that have ground truth; NaN if there is none."""
    classes = set()
    for r in records:
        classes.update(c for c, n in r.gt_counts.items() if n > 0)
    if num_classes is not None:
        classes &= set(range(num_classes))
    if not classes:
        return float("nan")
    return float(np.mean([class_ap(records, c) for c in sorted(classes)]))


def match_records(preds, ground_truth, iou_threshold: float) -> list[ImageRecord]:
    """``preds``: per image (boxes, scores, labels); ``ground_truth``: per image (boxes, labels)."""
    if len(preds) != len(ground_truth):
        raise ValueError(f"{len(preds)} prediction sets for {len(ground_truth)} images")
    return [match_image(k, *p, *g, iou_threshold) for k, (p, g) in enumerate(zip(preds, ground_truth))]


def evaluate_ap(preds, ground_truth, iou_threshold: float = 0.7, num_classes: int | None = None) -> float:
    return ap_from_records(match_records(preds, ground_truth, iou_threshold), num_classes)
