"""Lift per-frame 2D masks to per-point pseudo ground truth on partial clouds."""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud, unproject_frame, voxel_downsample
from .masks import MaskError, MaskSet, MaskSet2D

UNLABELED = -1


def resolve_overlaps(ms: MaskSet2D) -> np.ndarray:
    """Per-pixel label map (H, W); highest score wins, ties go to the lowest id."""
    labels = np.full((ms.height, ms.width), UNLABELED, dtype=np.int64)
    if len(ms) == 0:
        return labels
    # paint from weakest to strongest so the strongest mask ends on top
    order = np.lexsort((-ms.ids, ms.scores))
    for m in order:
        labels[ms.rasters[m]] = ms.ids[m]
    return labels


def lift_masks(frame, labels: np.ndarray, min_points: int = 1):
    """Unproject ``frame`` and give each point the label of its source pixel.

    ``frame`` is a :class:`~liftseg.dataio.FrameBundle`.  Returns the partial
    cloud and a :class:`MaskSet` whose scores are the 2D mask scores.
    """
    depth = frame.depth_frame
    if labels.shape != depth.depth.shape:
        raise MaskError(f"label map shape {labels.shape} != frame shape {depth.depth.shape}")
    cloud, pix = unproject_frame(depth, frame.intrinsics, frame.pose)
    point_labels = labels.ravel()[pix]
    score_of = dict(zip(frame.masks.ids.tolist(), frame.masks.scores.tolist()))
    masks = MaskSet.from_labels(point_labels, scores={i: score_of.get(i, 1.0) for i in set(point_labels.tolist())})
    return cloud, filter_masks(masks, min_points)


def filter_masks(ms: MaskSet, min_points: int) -> MaskSet:
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    return ms.select(ms.sizes >= min_points)


def downsample_with_labels(cloud: PointCloud, masks: MaskSet, voxel_size: float, min_points: int = 1):
    """Voxel-downsample a labeled cloud; each voxel takes its members' majority label.

    Voting runs over the per-point label map (``masks.to_labels``), unlabeled
    points vote for "none"; ties go to the lowest label with "none" lowest.
    """
    down, inverse = voxel_downsample(cloud, voxel_size)
    labels = masks.to_labels()
    uniq, lab_idx = np.unique(labels, return_inverse=True)
    counts = np.zeros((len(down), len(uniq)), dtype=np.int64)
    np.add.at(counts, (inverse, lab_idx.reshape(-1)), 1)
    vox_labels = uniq[np.argmax(counts, axis=1)] if len(down) else np.zeros(0, dtype=np.int64)
    score_of = {} if masks.scores is None else dict(zip(masks.ids.tolist(), masks.scores.tolist()))
    struct_of = dict(zip(masks.ids.tolist(), masks.structural.tolist()))
    out = MaskSet.from_labels(
        vox_labels,
        scores=None if masks.scores is None else score_of,
        structural={i for i, s in struct_of.items() if s},
    )
    return down, filter_masks(out, min_points), inverse


def lift_frame(frame, voxel_size: float | None = None, min_points: int = 1):
    """Overlap resolution, lifting and optional voxel downsampling for one frame."""
    labels = resolve_overlaps(frame.masks)
    cloud, masks = lift_masks(frame, labels, min_points=1)
    if voxel_size:
        cloud, masks, _ = downsample_with_labels(cloud, masks, voxel_size, min_points)
    else:
        masks = filter_masks(masks, min_points)
    return cloud, masks
