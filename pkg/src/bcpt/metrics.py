"""Segmentation and clustering-quality metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import normalized_mutual_info_score

from .cluster import BACKGROUND
from .errors import EmptyInputError, InvalidArgumentError, StructuralError


@dataclass
class SegmentationResult:
    per_class_iou: dict
    mean_iou: float
    fb_iou: float
    fg_iou: float
    bg_iou: float


@dataclass
class ClusterQuality:
    nmi: float
    purity: float
    composition: dict  # cluster id -> {group id: count}


def _iou(a, b):
    union = np.count_nonzero(a | b)
    if union == 0:
        return None
    return np.count_nonzero(a & b) / union


def iou_metrics(pred, truth, classes) -> SegmentationResult:
    """Per-class IoU, mean IoU over foreground classes, and FB-IoU.

    ``BACKGROUND`` (-1) marks background in both maps.  Classes absent from
    both maps are left out of the mean (``nan`` when none remain).  FB-IoU
    averages the IoU of "any foreground" and of background, skipping a side
    whose union is empty.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise StructuralError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    per_class = {}
    for c in classes:
        v = _iou(pred == c, truth == c)
        if v is not None:
            per_class[int(c)] = v
    mean_iou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    fg = _iou(pred != BACKGROUND, truth != BACKGROUND)
    bg = _iou(pred == BACKGROUND, truth == BACKGROUND)
    sides = [v for v in (fg, bg) if v is not None]
    fb = float(np.mean(sides)) if sides else float("nan")
    return SegmentationResult(
        per_class,
        mean_iou,
        fb,
        float("nan") if fg is None else fg,
        float("nan") if bg is None else bg,
    )


def cosine_map(prototype, query) -> np.ndarray:
    q_norm = np.linalg.norm(query, axis=0)
    p_norm = np.linalg.norm(prototype)
    out = np.zeros(query.shape[1])
    ok = q_norm > 0
    if p_norm > 0:
        out[ok] = (prototype / p_norm) @ (query[:, ok] / q_norm[ok])
    return out


def minmax(values) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def prototype_segment(support, support_mask, query, tau=0.7) -> np.ndarray:
    """Foreground mask of ``query`` (D x N) from the masked mean of ``support``.

    Each query pixel scores its cosine similarity to the prototype; the score
    map is min-max normalised and thresholded at ``tau``.
    """
    support = np.asarray(support, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    mask = np.asarray(support_mask, dtype=bool).reshape(-1)
    if support.shape[0] != query.shape[0]:
        raise StructuralError("support and query embeddings differ in dimension")
    if mask.shape[0] != support.shape[1]:
        raise StructuralError("support mask does not match the support pixels")
    if not mask.any():
        raise InvalidArgumentError("support foreground is empty")
    prototype = support[:, mask].mean(axis=1)
    return minmax(cosine_map(prototype, query)) >= tau


def cluster_quality(assignments, hidden) -> ClusterQuality:
    """NMI and purity of a clustering against the hidden grouping."""
    assignments = np.asarray(assignments).reshape(-1)
    hidden = np.asarray(hidden).reshape(-1)
    if assignments.shape != hidden.shape:
        raise StructuralError("assignments and hidden labels differ in length")
    if assignments.size == 0:
        raise EmptyInputError("no pixels to score")
    nmi = float(normalized_mutual_info_score(hidden, assignments))
    composition = {}
    for k in np.unique(assignments):
        counts = Counter(int(h) for h in hidden[assignments == k])
        composition[int(k)] = dict(sorted(counts.items()))
    purity = sum(max(c.values()) for c in composition.values()) / assignments.size
    return ClusterQuality(nmi, float(purity), composition)
