"""Oversegmentation smoothing and component splitting of predicted masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import split_mask_set
from .geometry import PointCloud, knn_graph
from .masks import MaskSet


@dataclass
class Oversegmentation:
    segment: np.ndarray
    count: int

    def __post_init__(self):
        self.segment = np.asarray(self.segment, dtype=np.int64)
        if len(self.segment) and (self.segment.min() < 0 or self.segment.max() >= self.count):
            raise ValueError("segment ids must lie in 0..count-1")

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.segment, minlength=self.count)


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)
        self.size = np.ones(n, dtype=np.int64)
        self.internal = np.zeros(n)

    def find(self, a):
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def union(self, a, b, w):
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], w)
        return a


def edge_weights(cloud: PointCloud, edges: np.ndarray) -> np.ndarray:
    """``1 - n_i . n_j`` with normals, else the RGB distance."""
    i, j = edges[:, 0], edges[:, 1]
    if cloud.normals is not None:
        return 1.0 - np.einsum("ij,ij->i", cloud.normals[i], cloud.normals[j])
    return np.linalg.norm(cloud.colors[i] - cloud.colors[j], axis=1)


def felzenszwalb_graph(n: int, edges: np.ndarray, weights: np.ndarray, fz_k: float,
                       min_segment: int = 0, trace: list | None = None) -> Oversegmentation:
    """Graph segmentation over an explicit weighted edge list.

    Edges are visited by ascending weight (stable, so ties keep list order).
    ``trace`` collects ``(edge index, merged)`` decisions of the main pass.
    """
    if fz_k <= 0:
        raise ValueError("fz_k must be positive")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64)
    order = np.argsort(weights, kind="stable")
    uf = _UnionFind(n)
    for e in order:
        a, b = uf.find(edges[e, 0]), uf.find(edges[e, 1])
        merged = False
        if a != b:
            w = weights[e]
            if w <= min(uf.internal[a] + fz_k / uf.size[a], uf.internal[b] + fz_k / uf.size[b]):
                uf.union(a, b, w)
                merged = True
        if trace is not None:
            trace.append((int(e), merged))
    if min_segment > 1:
        # small segments join the neighbor across their lowest-weight edge
        for e in order:
            a, b = uf.find(edges[e, 0]), uf.find(edges[e, 1])
            if a != b and (uf.size[a] < min_segment or uf.size[b] < min_segment):
                uf.union(a, b, weights[e])
    roots = np.array([uf.find(i) for i in range(n)], dtype=np.int64)
    _, seg = np.unique(roots, return_inverse=True)
    return Oversegmentation(seg.reshape(-1), int(seg.max()) + 1 if n else 0)


def felzenszwalb_segments(cloud: PointCloud, k_nn: int = 10, fz_k: float = 0.02,
                          min_segment: int = 20) -> Oversegmentation:
    n = len(cloud.positions)
    if n == 1:
        return Oversegmentation(np.zeros(1, dtype=np.int64), 1)
    edges, _ = knn_graph(cloud.positions, min(k_nn, n - 1))
    return felzenszwalb_graph(n, edges, edge_weights(cloud, edges), fz_k, min_segment)


def smooth_masks(masks: MaskSet, seg: Oversegmentation) -> MaskSet:
    """Assign whole segments to the mask covering a strict majority of their points.

    Ties among masks go to the lowest id; segments without a majority mask are
    left unassigned.  Masks that end up empty are dropped.
    """
    if masks.n_points != len(seg.segment):
        raise ValueError("masks and oversegmentation cover different point counts")
    if len(masks) == 0:
        return masks
    order = np.argsort(masks.ids, kind="stable")
    M = masks.members[order].astype(np.float64)
    onehot_counts = np.zeros((len(order), seg.count))
    for r in range(len(order)):
        onehot_counts[r] = np.bincount(seg.segment, weights=M[r], minlength=seg.count)
    best = np.argmax(onehot_counts, axis=0)          # first max = lowest id
    win = onehot_counts[best, np.arange(seg.count)] * 2 > seg.sizes
    owner = np.where(win, best, -1)
    point_owner = owner[seg.segment]
    members = point_owner[None, :] == np.arange(len(order))[:, None]
    out = MaskSet(members, masks.ids[order], None if masks.scores is None else masks.scores[order],
                  masks.structural[order])
    inv = np.argsort(order)
    out = out.select(inv)
    return out.select(out.sizes > 0)


def split_components(masks: MaskSet, positions: np.ndarray, eps: float = 0.05, min_pts: int = 10,
                     min_points: int = 1) -> MaskSet:
    return split_mask_set(masks, positions, eps, min_pts, min_points)


def postprocess(masks: MaskSet, cloud: PointCloud, seg: Oversegmentation | None = None, k_nn: int = 10,
                fz_k: float = 0.02, min_segment: int = 20, eps: float = 0.05, min_pts: int = 10,
                min_points: int = 1) -> MaskSet:
    """Smooth over the oversegmentation, then split distant components."""
    if seg is None:
        seg = felzenszwalb_segments(cloud, k_nn, fz_k, min_segment)
    return split_components(smooth_masks(masks, seg), cloud.positions, eps, min_pts, min_points)
