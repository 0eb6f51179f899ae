"""Class-agnostic instance AP with size buckets, plus the query-count sweep.

Protocol: predictions are ranked across all scenes by descending score (ties by
scene order, then mask id).  Each prediction greedily takes the unmatched GT
with the highest IoU at or above the threshold.  AP is the area under the
precision envelope (all-point interpolation).

Bucketed metrics restrict GT to a point-count range and drop structural GT.
An unmatched prediction is ignored, rather than counted as a false positive,
when it overlaps an excluded GT at the threshold or when its own size lies
outside the bucket.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .masks import MaskSet

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
BUCKETS = {"small": (0, 2000), "medium": (2000, 15000), "large": (15000, math.inf)}


class EvaluationError(ValueError):
    pass


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise EvaluationError("masks must cover the same points")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def iou_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """(P, G) IoU between two boolean membership stacks."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1:] != B.shape[1:]:
        raise EvaluationError(f"point counts differ: {A.shape[1:]} vs {B.shape[1:]}")
    inter = A @ B.T
    union = A.sum(1)[:, None] + B.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def area_under_envelope(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ranked TP flags (FPs are ``False``)."""
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=bool)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


@dataclass
class _SceneMatch:
    ious: np.ndarray      # (P, G)
    scores: np.ndarray
    ids: np.ndarray
    pred_sizes: np.ndarray
    gt_sizes: np.ndarray
    gt_structural: np.ndarray


def _scene(preds: MaskSet, gts: MaskSet) -> _SceneMatch:
    if preds.n_points != gts.n_points:
        raise EvaluationError(f"prediction covers {preds.n_points} points, GT covers {gts.n_points}")
    if len(preds) and preds.scores is None:
        raise EvaluationError("predictions need scores")
    scores = preds.scores if preds.scores is not None else np.zeros(0)
    return _SceneMatch(iou_matrix(preds.members, gts.members), scores, preds.ids, preds.sizes,
                       gts.sizes, gts.structural)


def _greedy(sm: _SceneMatch, thr: float, gt_keep: np.ndarray, pred_range=None):
    """Per prediction: +1 TP, 0 FP, -1 ignored; returned in this scene's score order."""
    order = np.lexsort((sm.ids, -sm.scores))
    taken = np.zeros(len(gt_keep), dtype=bool)
    flags = np.zeros(len(order), dtype=np.int8)
    for r, p in enumerate(order):
        row = sm.ious[p]
        cand = gt_keep & ~taken & (row >= thr)
        if cand.any():
            g = int(np.flatnonzero(cand)[np.argmax(row[cand])])
            taken[g] = True
            flags[r] = 1
            continue
        if np.any(~gt_keep & (row >= thr)):
            flags[r] = -1
        elif pred_range is not None and not (pred_range[0] < sm.pred_sizes[p] <= pred_range[1]):
            flags[r] = -1
    return sm.scores[order], flags


def _pooled_ap(scenes: list, thr: float, bucket=None) -> tuple:
    all_scores, all_flags, keys, n_gt = [], [], [], 0
    for si, sm in enumerate(scenes):
        if bucket is None:
            keep = np.ones(len(sm.gt_sizes), dtype=bool)
            rng = None
        else:
            lo, hi = bucket
            keep = (sm.gt_sizes > lo) & (sm.gt_sizes <= hi) & ~sm.gt_structural
            rng = bucket
        n_gt += int(keep.sum())
        s, f = _greedy(sm, thr, keep, rng)
        all_scores.append(s)
        all_flags.append(f)
        keys.append(np.full(len(s), si))
    if not all_scores:
        return float("nan"), 0
    s = np.concatenate(all_scores)
    f = np.concatenate(all_flags)
    k = np.concatenate(keys)
    rank = np.concatenate([np.arange(len(x)) for x in all_scores])
    order = np.lexsort((rank, k, -s))
    f = f[order]
    f = f[f >= 0]
    return area_under_envelope(f == 1, n_gt), n_gt


def average_precision(preds: MaskSet, gts: MaskSet, iou_threshold: float) -> float:
    """Single-scene AP at one IoU threshold (NaN when there is no GT)."""
    return _pooled_ap([_scene(preds, gts)], iou_threshold)[0]


def _nan_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap25: float
    buckets: dict = field(default_factory=dict)
    n_pred: int = 0
    n_gt: int = 0
    per_threshold: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "AP": _nan_none(self.ap), "AP50": _nan_none(self.ap50), "AP25": _nan_none(self.ap25),
            "buckets": {k: {m: _nan_none(v) for m, v in b.items()} for k, b in self.buckets.items()},
            "n_pred": self.n_pred, "n_gt": self.n_gt,
            "per_threshold": {f"{t:.2f}": _nan_none(v) for t, v in self.per_threshold.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        f = lambda v: float("nan") if v is None else float(v)
        return cls(f(d["AP"]), f(d["AP50"]), f(d["AP25"]),
                   {k: {m: (f(v) if m != "n_gt" else v) for m, v in b.items()} for k, b in d["buckets"].items()},
                   d["n_pred"], d["n_gt"], {float(t): f(v) for t, v in d.get("per_threshold", {}).items()})


def evaluate(preds, gts) -> EvalReport:
    """Evaluate one scene (two MaskSets) or many (two equal-length lists)."""
    if isinstance(preds, MaskSet):
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} prediction sets for {len(gts)} scenes")
    scenes = [_scene(p, g) for p, g in zip(preds, gts)]
    per = {t: _pooled_ap(scenes, t)[0] for t in IOU_THRESHOLDS}
    ap = float(np.mean(list(per.values())))
    ap50 = per[0.5]
    ap25, n_gt = _pooled_ap(scenes, 0.25)
    buckets = {}
    for name, rng in BUCKETS.items():
        b50, nb = _pooled_ap(scenes, 0.5, rng)
        b25, _ = _pooled_ap(scenes, 0.25, rng)
        bap = float(np.mean([_pooled_ap(scenes, t, rng)[0] for t in IOU_THRESHOLDS])) if nb else float("nan")
        buckets[name] = {"AP": bap, "AP50": b50, "AP25": b25, "n_gt": nb}
    return EvalReport(ap, ap50, ap25, buckets, int(sum(len(p) for p in preds)), n_gt, per)


def query_sweep(params, scenes, query_counts, predict_fn, seed: int = 0, warn=None) -> list:
    """Rows ``{"Q", "AP", "AP50", "AP25"}``, one per requested query count.

    ``scenes`` is a list of ``(cloud, gt MaskSet)``; ``predict_fn(cloud, params,
    Q, seed)`` returns a scored MaskSet.  Q is clamped per scene to its point
    count, with ``warn`` called on every clamp.
    """
    rows = []
    for Q in query_counts:
        preds, gts = [], []
        for i, (cloud, gt) in enumerate(scenes):
            q = min(int(Q), len(cloud.positions))
            if q < Q and warn is not None:
                warn(f"scene {i}: Q={Q} clamped to {q}")
            preds.append(predict_fn(cloud, params, q, seed))
            gts.append(gt)
        rep = evaluate(preds, gts)
        rows.append({"Q": int(Q), "AP": _nan_none(rep.ap), "AP50": _nan_none(rep.ap50),
                     "AP25": _nan_none(rep.ap25)})
    return rows
