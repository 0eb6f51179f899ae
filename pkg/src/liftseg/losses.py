"""Mask and objectness losses, the matching cost and Hungarian set matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import sigmoid_np, softplus_np

OBJECT, NO_OBJECT = 0, 1


@dataclass(frozen=True)
class LossWeights:
    obj: float = 2.0
    dice: float = 2.0
    ce: float = 5.0

    def __post_init__(self):
        if min(self.obj, self.dice, self.ce) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class MatchResult:
    pairs: list
    unmatched: list

    @property
    def query_index(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def target_index(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


# ---------------------------------------------------------------------------
# scalar losses (tensor or array inputs)
# ---------------------------------------------------------------------------


def dice_loss(p, t, eps: float = 1.0):
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps) over the last axis."""
    p = ad.as_tensor(p)
    t = np.asarray(t, dtype=np.float64)
    inter = ad.tsum(p * t, axis=-1)
    denom = ad.tsum(p, axis=-1) + (t.sum(axis=-1) + eps)
    return 1.0 - (2.0 * inter + eps) / denom


def bce_loss(h, t):
    """Mean binary cross-entropy from logits, in the stable softplus form."""
    h = ad.as_tensor(h)
    t = np.asarray(t, dtype=np.float64)
    return ad.mean(ad.softplus(h) - h * t, axis=-1)


def objectness_loss(logits, labels):
    """Mean cross-entropy of (Q, 2) logits against integer labels (0 = object)."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -ad.tsum(logp * onehot) * (1.0 / max(len(labels), 1))


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def pairwise_dice(probs: np.ndarray, targets: np.ndarray, eps: float = 1.0) -> np.ndarray:
    inter = probs @ targets.T
    return 1.0 - (2.0 * inter + eps) / (probs.sum(1)[:, None] + targets.sum(1)[None, :] + eps)


def pairwise_bce(heat: np.ndarray, targets: np.ndarray) -> np.ndarray:
    n = heat.shape[1]
    return (softplus_np(heat).sum(1)[:, None] - heat @ targets.T) / n


def log_prob_object(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z[:, OBJECT] - np.log(np.exp(z).sum(axis=1))


def matching_cost(heatmaps: np.ndarray, logits: np.ndarray, targets: np.ndarray,
                  w: LossWeights, use_objectness: bool = True) -> np.ndarray:
    """(Q, M) cost: weighted dice + weighted BCE - weighted log p(object)."""
    t = np.asarray(targets, dtype=np.float64)
    cost = w.dice * pairwise_dice(sigmoid_np(heatmaps), t) + w.ce * pairwise_bce(heatmaps, t)
    if use_objectness:
        cost = cost - w.obj * log_prob_object(logits)[:, None]
    return cost


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost one-to-one assignment on a rectangular matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    Q = cost.shape[0]
    if cost.size == 0:
        return MatchResult([], list(range(Q)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {q for q, _ in pairs}
    return MatchResult(pairs, [q for q in range(Q) if q not in matched])


def match_masks(pred, targets, w: LossWeights = LossWeights(), use_objectness: bool = True) -> MatchResult:
    """Bipartite matching of predicted heatmaps to target masks.

    ``pred`` is a :class:`~liftseg.network.Prediction` or a dict with numpy
    ``heatmaps``/``logits``; ``targets`` is a MaskSet or (M, N) boolean array.
    """
    heat = pred["heatmaps"] if isinstance(pred, dict) else pred.heatmaps
    logits = pred["logits"] if isinstance(pred, dict) else pred.logits
    heat = getattr(heat, "data", heat)
    logits = getattr(logits, "data", logits)
    T = getattr(targets, "members", targets)
    if len(T) == 0:
        raise ValueError("match_masks needs at least one target")
    return hungarian(matching_cost(heat, logits, T, w, use_objectness))


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------


def mask_loss(heat, targets: np.ndarray, match: MatchResult, w: LossWeights, eps: float = 1.0):
    """Mean over matched pairs of weighted dice + weighted BCE; returns (total, dice, ce)."""
    qi, ti = match.query_index, match.target_index
    h = ad.take_rows(heat, qi)
    t = np.asarray(targets, dtype=np.float64)[ti]
    dice = ad.mean(dice_loss(ad.sigmoid(h), t, eps))
    ce = ad.mean(bce_loss(h, t))
    return w.dice * dice + w.ce * ce, dice, ce


def loss_stage1(out: dict, targets, w: LossWeights = LossWeights()):
    """L = L_mask + lambda_obj * L_obj.

    ``out`` holds tensors ``heatmaps`` (Q, N) and ``logits`` (Q, 2).  Returns
    ``(loss_tensor, terms)`` where ``terms`` has float entries ``dice``, ``ce``,
    ``mask``, ``obj`` and ``total`` plus the :class:`MatchResult`.
    """
    heat, logits = out["heatmaps"], out["logits"]
    T = np.asarray(getattr(targets, "members", targets), dtype=bool)
    Q = heat.shape[0]
    if len(T) == 0:
        obj = objectness_loss(logits, np.full(Q, NO_OBJECT))
        total = w.obj * obj
        terms = {"dice": 0.0, "ce": 0.0, "mask": 0.0, "obj": float(obj.data), "total": float(total.data),
                 "match": MatchResult([], list(range(Q)))}
        return total, terms
    match = hungarian(matching_cost(heat.data, logits.data, T, w))
    labels = np.full(Q, NO_OBJECT)
    labels[match.query_index] = OBJECT
    lmask, dice, ce = mask_loss(heat, T, match, w)
    obj = objectness_loss(logits, labels)
    total = lmask + w.obj * obj
    terms = {"dice": float(dice.data), "ce": float(ce.data), "mask": float(lmask.data),
             "obj": float(obj.data), "total": float(total.data), "match": match}
    return total, terms


def loss_stage2(out: dict, targets, w: LossWeights = LossWeights()):
    """L_mask over matched pairs only; no objectness term.  Zero targets give zero loss.

    The matching is the Stage-1 one, objectness cost included, so a pseudo-label
    goes to the query the pre-trained model already treats as that object.
    """
    heat = out["heatmaps"]
    T = np.asarray(getattr(targets, "members", targets), dtype=bool)
    if len(T) == 0:
        zero = ad.Tensor(0.0)
        return zero, {"dice": 0.0, "ce": 0.0, "mask": 0.0, "obj": 0.0, "total": 0.0,
                      "match": MatchResult([], list(range(heat.shape[0]))), "skipped": True}
    match = hungarian(matching_cost(heat.data, out["logits"].data, T, w))
    lmask, dice, ce = mask_loss(heat, T, match, w)
    terms = {"dice": float(dice.data), "ce": float(ce.data), "mask": float(lmask.data), "obj": 0.0,
             "total": float(lmask.data), "match": match}
    return lmask, terms
