"""Confidence scoring of predicted masks and Stage-2 pseudo-label selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import sigmoid_np
from .clustering import split_instances, split_mask_set
from .masks import MaskSet
from .network import binarize

__all__ = ["ScoredMask", "mask_confidence", "obj_confidence", "confidences", "scored_masks",
           "prediction_to_masks", "select_masks", "split_instances", "resolve_pseudo_overlaps",
           "make_pseudo_labels"]


@dataclass
class ScoredMask:
    membership: np.ndarray
    c_mask: float
    c_obj: float
    c: float


def mask_confidence(h) -> float:
    """Mean sigmoid over the points the mask claims (sigmoid > 0.5); 0 when it claims none."""
    h = np.asarray(h, dtype=np.float64)
    s = sigmoid_np(h)
    on = h > 0
    return float(s[on].mean()) if on.any() else 0.0


def obj_confidence(logits) -> float:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return float(e[0] / e.sum())


def confidences(heatmaps: np.ndarray, logits: np.ndarray):
    """Vectorised ``(c_mask, c_obj, c)`` for every query."""
    H = np.asarray(heatmaps, dtype=np.float64)
    on = H > 0
    s = np.where(on, sigmoid_np(H), 0.0)
    cnt = on.sum(axis=1)
    c_mask = np.divide(s.sum(axis=1), cnt, out=np.zeros(len(H)), where=cnt > 0)
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    c_obj = e[:, 0] / e.sum(axis=1)
    return c_mask, c_obj, c_mask * c_obj


def scored_masks(pred) -> list:
    c_mask, c_obj, c = confidences(pred.heatmaps, pred.logits)
    members = binarize(pred.heatmaps)
    return [ScoredMask(members[q], float(c_mask[q]), float(c_obj[q]), float(c[q])) for q in range(len(c))]


def suppress_duplicates(masks: MaskSet, iou_threshold: float) -> MaskSet:
    """Greedy mask NMS: in descending score order (ties by id) drop masks whose IoU
    with an already kept mask exceeds ``iou_threshold``."""
    if len(masks) < 2:
        return masks
    from .evaluation import iou_matrix

    order = np.lexsort((masks.ids, -masks.scores))
    I = iou_matrix(masks.members, masks.members)
    kept = []
    for m in order:
        if all(I[m, k] <= iou_threshold for k in kept):
            kept.append(m)
    return masks.select(np.sort(np.array(kept)))


def prediction_to_masks(pred, tau: float | None = None, nms_iou: float | None = None) -> MaskSet:
    """Non-empty predicted masks scored by ``c``; ``tau`` optionally keeps only ``c > tau``
    and ``nms_iou`` optionally removes duplicates.  Mask ids are the query indices.
    """
    members = binarize(pred.heatmaps)
    _, _, c = confidences(pred.heatmaps, pred.logits)
    keep = members.any(axis=1)
    if tau is not None:
        keep &= c > tau
    q = np.flatnonzero(keep)
    out = MaskSet(members[q], q, c[q])
    return out if nms_iou is None else suppress_duplicates(out, nms_iou)


def select_masks(pred, tau_c: float = 0.75) -> MaskSet:
    if not 0.0 <= tau_c <= 1.0:
        raise ValueError(f"tau_c must lie in [0, 1], got {tau_c}")
    return prediction_to_masks(pred, tau_c)


def resolve_pseudo_overlaps(masks: MaskSet, min_points: int = 1) -> MaskSet:
    """Give every point only to its highest-scoring mask; masks left below ``min_points`` are dropped."""
    if len(masks) == 0:
        return masks
    labels = masks.to_labels()
    ids = masks.ids
    members = labels[None, :] == ids[:, None]
    out = MaskSet(members, ids, masks.scores, masks.structural)
    return out.select(out.sizes >= max(min_points, 1))


def make_pseudo_labels(pred, positions: np.ndarray, tau_c: float = 0.75, eps: float = 0.05, min_pts: int = 10,
                       min_points: int = 1, resolve_overlaps: bool = True) -> MaskSet:
    """Select confident masks, optionally make them disjoint, then DBSCAN-split each."""
    sel = select_masks(pred, tau_c)
    if resolve_overlaps:
        sel = resolve_pseudo_overlaps(sel, min_points)
    return split_mask_set(sel, positions, eps, min_pts, min_points)
