import numpy as np
import pytest

from liftseg.geometry import PointCloud
from liftseg.masks import MaskSet
from liftseg.sam3d import PartialSegmentation, merge_pair, merge_sequence, overlap_matrix, overlap_score, transfer_to_cloud

from oracles import overlap_reference


def part(positions, labels, scores=None, fid="f"):
    ms = MaskSet.from_labels(np.asarray(labels), scores)
    return PartialSegmentation(PointCloud(np.asarray(positions, float)), ms, [fid])


@pytest.mark.parametrize("seed", range(10))
def test_overlap_matrix_matches_reference(seed):
    r = np.random.default_rng(seed)
    pa, pb = r.uniform(0, 1, (40, 3)), r.uniform(0, 1, (35, 3))
    Ma = r.uniform(size=(3, 40)) < 0.3
    Mb = r.uniform(size=(4, 35)) < 0.3
    Mb[0] = False
    assert np.allclose(overlap_matrix(pa, Ma, pb, Mb, 0.15), overlap_reference(pa, Ma, pb, Mb, 0.15), atol=1e-12)


def test_overlap_score_scalar():
    line = np.column_stack([np.arange(4.0), np.zeros(4), np.zeros(4)])
    shifted = line + [0, 0.05, 0]
    assert overlap_score(np.ones(4, bool), line, np.ones(4, bool), shifted, 0.1) == 1.0
    assert overlap_score(np.ones(4, bool), line, np.ones(4, bool), shifted + [0, 1, 0], 0.1) == 0.0
    with pytest.raises(ValueError):
        overlap_matrix(line, np.ones((1, 4), bool), line, np.ones((1, 4), bool), 0.0)


def test_merge_pair_unites_and_passes_through():
    a = part([[0, 0, 0], [0.1, 0, 0], [5, 0, 0]], [0, 0, 1], {0: 0.8, 1: 0.6}, "a")
    b = part([[0.05, 0, 0], [9, 0, 0]], [0, 1], {0: 0.2, 1: 0.4}, "b")
    m = merge_pair(a, b, theta=0.5, radius=0.1)
    assert len(m.cloud) == 5 and m.frame_ids == ["a", "b"]
    assert m.masks.members.astype(int).tolist() == [[1, 1, 0, 1, 0], [0, 0, 1, 0, 0], [0, 0, 0, 0, 1]]
    # the united mask's score is the point-weighted mean of its parts
    assert m.masks.scores.tolist() == pytest.approx([(0.8 * 2 + 0.2) / 3, 0.6, 0.4])


def test_merge_pair_one_to_one_greedy():
    # two masks in A both fully overlap the single mask of B; the higher score wins, then lower index
    a = part([[0, 0, 0], [0.01, 0, 0]], [0, 1], None, "a")
    b = part([[0, 0, 0], [0.01, 0, 0]], [0, 0], None, "b")
    m = merge_pair(a, b, theta=0.3, radius=0.05)
    assert len(m.masks) == 2 and m.masks.members[0, 2:].all() and not m.masks.members[1, 2:].any()
    with pytest.raises(ValueError):
        merge_pair(a, b, theta=0.0)


def test_merge_sequence_and_transfer():
    frames = [part([[i * 0.01, 0, 0], [3 + i * 0.01, 0, 0]], [0, 1], {0: 0.5, 1: 0.5}, str(i)) for i in range(5)]
    merged = merge_sequence(frames, theta=0.5, radius=0.1)
    assert len(merged.masks) == 2 and merged.frame_ids == ["0", "1", "2", "3", "4"]
    target = PointCloud(np.array([[0.0, 0, 0], [3, 0, 0], [10, 0, 0]]))
    out = transfer_to_cloud(merged, target, radius=0.1)
    assert out.members.astype(int).tolist() == [[1, 0, 0], [0, 1, 0]]
    with pytest.raises(ValueError):
        merge_sequence([])


def test_partial_segmentation_validation():
    with pytest.raises(ValueError):
        PartialSegmentation(PointCloud(np.zeros((2, 3))), MaskSet(np.ones((1, 3), bool), [0]))
