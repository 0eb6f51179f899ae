"""Density clustering shared by pseudo-label splitting and post-processing."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

NOISE = -1


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (``-1`` for noise), clusters numbered in discovery order.

    A point is core when at least ``min_pts`` points (itself included) lie
    within distance ``eps``.  Scanning points by index, the first unvisited
    core point founds the next cluster; a border point joins the earliest
    founded cluster that reaches it.  This is the classic sequential result,
    computed here from core-point components.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    P = np.asarray(points, dtype=np.float64)
    n = len(P)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    pairs = cKDTree(P).query_pairs(eps, output_type="ndarray")
    deg = np.ones(n, dtype=np.int64)
    np.add.at(deg, pairs[:, 0], 1)
    np.add.at(deg, pairs[:, 1], 1)
    core = deg >= min_pts
    if not core.any():
        return labels
    both = core[pairs[:, 0]] & core[pairs[:, 1]]
    cp = pairs[both]
    A = sp.coo_matrix((np.ones(len(cp)), (cp[:, 0], cp[:, 1])), shape=(n, n))
    _, comp = connected_components(A, directed=False)
    # rank components by their lowest-index core point
    core_idx = np.flatnonzero(core)
    first = {}
    for i in core_idx:
        first.setdefault(int(comp[i]), int(i))
    rank = {c: r for r, c in enumerate(sorted(first, key=first.get))}
    labels[core_idx] = [rank[int(comp[i])] for i in core_idx]
    # border points: earliest cluster among core neighbors
    mixed = core[pairs[:, 0]] ^ core[pairs[:, 1]]
    for a, b in pairs[mixed]:
        c, border = (a, b) if core[a] else (b, a)
        lc = labels[c]
        if labels[border] == NOISE or lc < labels[border]:
            labels[border] = lc
    return labels


def split_instances(positions: np.ndarray, member: np.ndarray, eps: float, min_pts: int,
                    min_points: int = 1) -> list:
    """Split one boolean mask into its DBSCAN clusters; noise and tiny clusters dropped."""
    member = np.asarray(member, dtype=bool)
    idx = np.flatnonzero(member)
    if len(idx) == 0:
        return []
    lab = dbscan(np.asarray(positions)[idx], eps, min_pts)
    out = []
    for c in range(lab.max() + 1):
        sel = idx[lab == c]
        if len(sel) >= max(min_points, 1):
            m = np.zeros(len(member), dtype=bool)
            m[sel] = True
            out.append(m)
    return out


def split_mask_set(masks, positions: np.ndarray, eps: float, min_pts: int, min_points: int = 1):
    """Apply :func:`split_instances` to every mask.

    Pieces keep the parent's score and structural flag.  New ids are
    sequential in (parent order, cluster order).
    """
    from .masks import MaskSet

    rows, scores, structural = [], [], []
    for m in range(len(masks)):
        for piece in split_instances(positions, masks.members[m], eps, min_pts, min_points):
            rows.append(piece)
            structural.append(bool(masks.structural[m]))
            if masks.scores is not None:
                scores.append(float(masks.scores[m]))
    n = masks.n_points
    members = np.array(rows, dtype=bool).reshape(len(rows), n)
    return MaskSet(members, np.arange(len(rows)), np.array(scores) if masks.scores is not None else None,
                   np.array(structural, dtype=bool))
