"""Mask containers shared by every stage.

A :class:`MaskSet` holds binary memberships over the N points of one cloud,
stored as an ``(M, N)`` boolean matrix.  A :class:`MaskSet2D` is the image
counterpart, ``(M, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MaskError(ValueError):
    pass


@dataclass
class MaskSet:
    members: np.ndarray
    ids: np.ndarray
    scores: np.ndarray | None = None
    structural: np.ndarray | None = None

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=bool)
        if self.members.ndim != 2:
            raise MaskError(f"members must be (M, N), got shape {self.members.shape}")
        m = len(self.members)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if len(self.ids) != m:
            raise MaskError(f"{len(self.ids)} ids for {m} masks")
        if len(np.unique(self.ids)) != m:
            raise MaskError("mask ids must be unique")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != m:
                raise MaskError(f"{len(self.scores)} scores for {m} masks")
        if self.structural is None:
            self.structural = np.zeros(m, dtype=bool)
        self.structural = np.asarray(self.structural, dtype=bool).reshape(-1)
        if len(self.structural) != m:
            raise MaskError(f"{len(self.structural)} structural flags for {m} masks")

    @classmethod
    def empty(cls, n_points: int, with_scores: bool = False) -> "MaskSet":
        return cls(np.zeros((0, n_points), dtype=bool), np.zeros(0, dtype=np.int64),
                   np.zeros(0) if with_scores else None)

    @classmethod
    def from_labels(cls, labels: np.ndarray, scores: dict | None = None,
                    structural: set | None = None) -> "MaskSet":
        """One mask per non-negative label value, ids equal to the label."""
        labels = np.asarray(labels, dtype=np.int64)
        ids = np.unique(labels[labels >= 0])
        members = labels[None, :] == ids[:, None]
        sc = None if scores is None else np.array([scores[int(i)] for i in ids], dtype=np.float64)
        st = None if structural is None else np.array([int(i) in structural for i in ids])
        return cls(members.reshape(len(ids), len(labels)), ids, sc, st)

    @property
    def n_points(self) -> int:
        return self.members.shape[1]

    def __len__(self) -> int:
        return len(self.members)

    @property
    def sizes(self) -> np.ndarray:
        return self.members.sum(axis=1)

    def select(self, keep) -> "MaskSet":
        keep = np.asarray(keep)
        return MaskSet(
            self.members[keep],
            self.ids[keep],
            None if self.scores is None else self.scores[keep],
            self.structural[keep],
        )

    def restrict_points(self, index) -> "MaskSet":
        """Membership over a subset (or reordering) of points; empty masks dropped."""
        sub = MaskSet(self.members[:, index], self.ids, self.scores, self.structural)
        return sub.select(sub.sizes > 0)

    def with_scores(self, scores) -> "MaskSet":
        return MaskSet(self.members, self.ids, scores, self.structural)

    def renumbered(self) -> "MaskSet":
        return MaskSet(self.members, np.arange(len(self)), self.scores, self.structural)

    def to_labels(self) -> np.ndarray:
        """Per-point label: id of the covering mask with the highest score,
        lowest id on ties (unscored masks all tie), -1 when uncovered."""
        labels = np.full(self.n_points, -1, dtype=np.int64)
        if len(self) == 0:
            return labels
        score = self.scores if self.scores is not None else np.zeros(len(self))
        order = np.lexsort((self.ids, -score))
        for m in order[::-1]:
            labels[self.members[m]] = self.ids[m]
        return labels

    def equals(self, other: "MaskSet") -> bool:
        same_scores = (self.scores is None and other.scores is None) or (
            self.scores is not None and other.scores is not None
            and np.array_equal(self.scores, other.scores)
        )
        return (
            self.members.shape == other.members.shape
            and np.array_equal(self.members, other.members)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.structural, other.structural)
            and same_scores
        )


@dataclass
class MaskSet2D:
    width: int
    height: int
    rasters: np.ndarray
    ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.rasters = np.asarray(self.rasters, dtype=bool)
        if self.rasters.ndim == 2 and self.rasters.size == 0:
            self.rasters = self.rasters.reshape(0, self.height, self.width)
        if self.rasters.shape[1:] != (self.height, self.width):
            raise MaskError(
                f"mask rasters have shape {self.rasters.shape[1:]}, expected {(self.height, self.width)}"
            )
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(self.ids) == len(self.scores) == len(self.rasters)):
            raise MaskError("ids, scores and rasters must have equal length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise MaskError("mask ids must be unique")
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise MaskError("mask scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.ids)

    def equals(self, other: "MaskSet2D") -> bool:
        return (
            self.width == other.width and self.height == other.height
            and np.array_equal(self.rasters, other.rasters)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.scores, other.scores)
        )


def rle_encode(flat: np.ndarray) -> list[int]:
    """Run lengths of a flat boolean array, starting with a (possibly zero) run of False."""
    flat = np.asarray(flat, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, size: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if np.any(runs < 0):
        raise MaskError("negative run length in RLE")
    if runs.sum() != size:
        raise MaskError(f"RLE covers {int(runs.sum())} elements, expected {size}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs)
