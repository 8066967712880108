"""Classification accuracy and part-segmentation IoU."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float((preds == labels).mean())


def shape_iou(pred, gt, parts: Sequence[int]) -> float:
    """Mean over ``parts`` of |pred ∩ gt| / |pred ∪ gt|; a part absent from both scores 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    if len(parts) == 0:
        raise ValueError("a category needs at least one part")
    ious = []
    for p in parts:
        in_pred, in_gt = pred == p, gt == p
        union = np.count_nonzero(in_pred | in_gt)
        ious.append(1.0 if union == 0 else np.count_nonzero(in_pred & in_gt) / union)
    return float(np.mean(ious))


def per_shape_ious(per_point_preds, per_point_labels, categories,
                   parts_per_category: Mapping[int, Sequence[int]]) -> np.ndarray:
    preds = list(per_point_preds)
    labels = list(per_point_labels)
    categories = np.asarray(categories).reshape(-1)
    if not len(preds) == len(labels) == len(categories):
        raise ValueError("predictions, labels and categories must have equal lengths")
    return np.array([shape_iou(p, g, parts_per_category[int(c)])
                     for p, g, c in zip(preds, labels, categories)])


def miou(per_point_preds, per_point_labels, parts_per_category: Mapping[int, Sequence[int]],
         categories=None) -> float:
    """Mean of per-shape IoUs over all shapes.

    ``categories`` gives each shape's object category; when omitted it is
    inferred as the category owning the shape's first ground-truth label.
    """
    if categories is None:
        owner = {p: c for c, ps in parts_per_category.items() for p in ps}
        categories = [owner[int(np.asarray(g).reshape(-1)[0])] for g in per_point_labels]
    ious = per_shape_ious(per_point_preds, per_point_labels, categories, parts_per_category)
    if ious.size == 0:
        raise ValueError("mIoU of an empty set is undefined")
    return float(ious.mean())


def per_category_iou(per_point_preds, per_point_labels, categories,
                     parts_per_category: Mapping[int, Sequence[int]]) -> dict[int, float]:
    """Mean shape IoU within each object category present."""
    ious = per_shape_ious(per_point_preds, per_point_labels, categories, parts_per_category)
    categories = np.asarray(categories).reshape(-1)
    return {int(c): float(ious[categories == c].mean()) for c in np.unique(categories)}
