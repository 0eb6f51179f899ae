"""SAM3D-style baseline: bottom-up merging of per-frame 3D masks.

Masks of two partial segmentations are paired greedily by descending overlap
score, one-to-one, when the score reaches ``theta``.  Paired masks are united
and the rest pass through.  Frames are merged in adjacent pairs, round by round,
until one segmentation remains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import PointCloud
from .masks import MaskSet


@dataclass
class PartialSegmentation:
    cloud: PointCloud
    masks: MaskSet
    frame_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.masks.n_points != len(self.cloud.positions):
            raise ValueError("mask set does not cover the cloud")


def _neighbors(pa: np.ndarray, pb: np.ndarray, radius: float) -> sp.csr_matrix:
    """Boolean (Na, Nb) matrix of point pairs within ``radius``."""
    if len(pa) == 0 or len(pb) == 0:
        return sp.csr_matrix((len(pa), len(pb)), dtype=bool)
    D = cKDTree(pa).sparse_distance_matrix(cKDTree(pb), radius, output_type="ndarray")
    return sp.csr_matrix((np.ones(len(D), dtype=bool), (D["i"], D["j"])), shape=(len(pa), len(pb)))


def overlap_matrix(pa: np.ndarray, Ma: np.ndarray, pb: np.ndarray, Mb: np.ndarray, radius: float) -> np.ndarray:
    """(Ma, Mb) bidirectional-max overlap scores between two mask stacks."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    Ma = np.asarray(Ma, dtype=bool)
    Mb = np.asarray(Mb, dtype=bool)
    if len(Ma) == 0 or len(Mb) == 0:
        return np.zeros((len(Ma), len(Mb)))
    S = _neighbors(pa, pb, radius).astype(np.float64)
    near_b = (S @ Mb.T.astype(np.float64)) > 0      # (Na, Mb): point of A has a member of mask j nearby
    near_a = (S.T @ Ma.T.astype(np.float64)) > 0    # (Nb, Ma)
    sa = np.maximum(Ma.sum(1), 1)[:, None]
    sb = np.maximum(Mb.sum(1), 1)[None, :]
    ab = (Ma.astype(np.float64) @ near_b) / sa
    ba = (near_a.T.astype(np.float64) @ Mb.T.astype(np.float64)) / sb
    return np.maximum(ab, ba)


def overlap_score(mask_a, cloud_a, mask_b, cloud_b, radius: float) -> float:
    pa = getattr(cloud_a, "positions", cloud_a)
    pb = getattr(cloud_b, "positions", cloud_b)
    return float(overlap_matrix(pa, np.asarray(mask_a)[None], pb, np.asarray(mask_b)[None], radius)[0, 0])


def merge_pair(a: PartialSegmentation, b: PartialSegmentation, theta: float = 0.3,
               radius: float = 0.2) -> PartialSegmentation:
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    O = overlap_matrix(a.cloud.positions, a.masks.members, b.cloud.positions, b.masks.members, radius)
    na, nb = len(a.masks), len(b.masks)
    partner = np.full(na, -1)
    used_b = np.zeros(nb, dtype=bool)
    if O.size:
        ii, jj = np.nonzero(O >= theta)
        order = np.lexsort((jj, ii, -O[ii, jj]))
        for k in order:
            i, j = ii[k], jj[k]
            if partner[i] < 0 and not used_b[j]:
                partner[i] = j
                used_b[j] = True
    Na, Nb = a.masks.n_points, b.masks.n_points
    sa = a.masks.scores if a.masks.scores is not None else np.ones(na)
    sb = b.masks.scores if b.masks.scores is not None else np.ones(nb)
    rows, scores, structural = [], [], []
    for i in range(na):
        row = np.zeros(Na + Nb, dtype=bool)
        row[:Na] = a.masks.members[i]
        wa = a.masks.members[i].sum()
        s, st = sa[i] * wa, a.masks.structural[i]
        w = wa
        j = partner[i]
        if j >= 0:
            row[Na:] = b.masks.members[j]
            wb = b.masks.members[j].sum()
            s += sb[j] * wb
            w += wb
            st = st or b.masks.structural[j]
        rows.append(row)
        scores.append(s / max(w, 1))
        structural.append(st)
    for j in np.flatnonzero(~used_b):
        row = np.zeros(Na + Nb, dtype=bool)
        row[Na:] = b.masks.members[j]
        rows.append(row)
        scores.append(sb[j])
        structural.append(b.masks.structural[j])
    members = np.array(rows, dtype=bool).reshape(len(rows), Na + Nb)
    masks = MaskSet(members, np.arange(len(rows)), np.array(scores, dtype=np.float64),
                    np.array(structural, dtype=bool))
    return PartialSegmentation(PointCloud.concatenate([a.cloud, b.cloud]), masks, a.frame_ids + b.frame_ids)


def merge_sequence(frames: list, theta: float = 0.3, radius: float = 0.2) -> PartialSegmentation:
    """Pairwise halving: merge (0,1), (2,3), ... each round; an odd tail passes to the next round."""
    if not frames:
        raise ValueError("merge_sequence needs at least one frame")
    level = list(frames)
    while len(level) > 1:
        nxt = [merge_pair(level[k], level[k + 1], theta, radius) for k in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def transfer_to_cloud(seg: PartialSegmentation, target: PointCloud, radius: float) -> MaskSet:
    """Carry merged labels to another cloud by nearest neighbor within ``radius``."""
    labels = seg.masks.to_labels()
    tree = cKDTree(seg.cloud.positions)
    d, nn = tree.query(target.positions, k=1, distance_upper_bound=radius)
    ok = np.isfinite(d)
    out = np.full(len(target.positions), -1, dtype=np.int64)
    out[ok] = labels[nn[ok]]
    ids = seg.masks.ids
    members = out[None, :] == ids[:, None]
    ms = MaskSet(members, ids, seg.masks.scores, seg.masks.structural)
    return ms.select(ms.sizes > 0)
