"""Slow, obviously-correct references used by the unit and acceptance suites."""

import itertools
from collections import deque

import numpy as np


def dbscan_reference(P, eps, min_pts):
    """Textbook sequential DBSCAN over an O(n^2) distance matrix."""
    n = len(P)
    D = np.linalg.norm(P[:, None] - P[None], axis=2)
    nbrs = [np.flatnonzero(D[i] <= eps) for i in range(n)]
    core = np.array([len(x) >= min_pts for x in nbrs])
    labels = np.full(n, -1)
    c = -1
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        c += 1
        labels[i] = c
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in nbrs[j]:
                if labels[k] == -1:
                    labels[k] = c
                    if core[k]:
                        queue.append(k)
    return labels


def knn_reference(P, k):
    D = np.linalg.norm(P[:, None] - P[None], axis=2)
    np.fill_diagonal(D, np.inf)
    return np.sort(D, axis=1)[:, :k]


def assignment_reference(cost):
    q, m = cost.shape
    best = np.inf
    if q >= m:
        for rows in itertools.permutations(range(q), m):
            best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    else:
        for cols in itertools.permutations(range(m), q):
            best = min(best, sum(cost[r, c] for r, c in enumerate(cols)))
    return best


def ap_reference(pred_members, scores, gt_members, threshold):
    """AP at one IoU threshold by explicit enumeration of every score cut.

    Predictions are ranked by score (ties by index); at each cut the top-k
    predictions are matched greedily in rank order to the unmatched GT of
    highest IoU (ties to the lowest GT index) with IoU >= threshold.
    Precision/recall are recomputed from scratch for every k, and the area is
    the sum over recall steps of the maximum precision at any recall at least
    that large.
    """
    G = len(gt_members)
    if G == 0:
        return float("nan")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    points = [(0.0, 1.0)]
    for k in range(1, len(order) + 1):
        used = set()
        tp = 0
        for i in order[:k]:
            best, bj = -1.0, None
            for j in range(G):
                if j in used:
                    continue
                inter = np.logical_and(pred_members[i], gt_members[j]).sum()
                union = np.logical_or(pred_members[i], gt_members[j]).sum()
                iou = inter / union if union else 0.0
                if iou >= threshold and iou > best:
                    best, bj = iou, j
            if bj is not None:
                used.add(bj)
                tp += 1
        points.append((tp / G, tp / k))
    recalls = sorted({r for r, _ in points})
    area, prev = 0.0, 0.0
    for r in recalls:
        if r == 0:
            continue
        area += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return area


def is_union_of_segments(members, segment):
    """Every segment lies entirely inside or entirely outside each mask."""
    for row in np.asarray(members, dtype=bool):
        inside = np.bincount(segment, weights=row, minlength=segment.max() + 1)
        total = np.bincount(segment, minlength=segment.max() + 1)
        if not np.all((inside == 0) | (inside == total)):
            return False
    return True


def overlap_reference(pa, Ma, pb, Mb, radius):
    """Bidirectional-max fraction of a mask's points with a partner-mask point within radius."""
    D = np.linalg.norm(pa[:, None] - pb[None], axis=2) <= radius
    out = np.zeros((len(Ma), len(Mb)))
    for i in range(len(Ma)):
        for j in range(len(Mb)):
            near = D[np.ix_(Ma[i], Mb[j])]
            ab = near.any(axis=1).mean() if Ma[i].any() else 0.0
            ba = near.any(axis=0).mean() if Mb[j].any() else 0.0
            out[i, j] = max(ab, ba)
    return out
