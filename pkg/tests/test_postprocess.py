import numpy as np
import pytest

from liftseg.geometry import PointCloud
from liftseg.masks import MaskSet
from liftseg.postprocess import (Oversegmentation, edge_weights, felzenszwalb_graph, felzenszwalb_segments,
                                 postprocess, smooth_masks)

from conftest import blob_cloud
from oracles import is_union_of_segments


def test_felzenszwalb_two_blobs(rng):
    cloud, gt = blob_cloud(rng, [[0, 0, 0], [1, 0, 0]], n_each=40, spread=0.05)
    seg = felzenszwalb_segments(cloud, k_nn=6, fz_k=0.5, min_segment=5)
    # color differs only across blobs, so no segment straddles them
    for s in range(seg.count):
        assert len(np.unique(gt.to_labels()[seg.segment == s])) == 1
    assert np.all(seg.sizes >= 5)


def test_felzenszwalb_graph_hand_example():
    # chain 0-1-2-3 with one heavy edge in the middle
    edges = np.array([[0, 1], [1, 2], [2, 3]])
    w = np.array([0.0, 5.0, 0.0])
    seg = felzenszwalb_graph(4, edges, w, fz_k=1.0)
    assert seg.count == 2 and seg.segment.tolist() == [0, 0, 1, 1]
    merged = felzenszwalb_graph(4, edges, w, fz_k=1.0, min_segment=3)
    assert merged.count == 1
    trace = []
    felzenszwalb_graph(4, edges, w, fz_k=1.0, trace=trace)
    assert trace == [(0, True), (2, True), (1, False)]
    with pytest.raises(ValueError):
        felzenszwalb_graph(4, edges, w, fz_k=0.0)


def test_edge_weights_normals_or_color():
    pos = np.zeros((2, 3))
    e = np.array([[0, 1]])
    with_n = PointCloud(pos, normals=np.array([[0, 0, 1.0], [0, 1.0, 0]]))
    assert edge_weights(with_n, e)[0] == pytest.approx(1.0)
    col = PointCloud(pos, np.array([[0, 0, 0], [0.3, 0.4, 0]]))
    assert edge_weights(col, e)[0] == pytest.approx(0.5)


def test_smoothing_majority_and_ties():
    seg = Oversegmentation(np.array([0, 0, 0, 1, 1, 2, 2]), 3)
    m = np.array([[1, 1, 0, 1, 0, 0, 0],
                  [0, 0, 1, 0, 1, 0, 0]], bool)
    out = smooth_masks(MaskSet(m, [5, 3], [0.1, 0.2]), seg)
    # segment 0: id 5 has 2 of 3; segment 1: 1-1 tie with no strict majority; segment 2: nobody
    assert out.ids.tolist() == [5] and out.members[0].tolist() == [1, 1, 1, 0, 0, 0, 0]
    assert out.scores.tolist() == [0.1]


def test_smoothing_lowest_id_among_overlaps():
    seg = Oversegmentation(np.zeros(4, dtype=np.int64), 1)
    m = np.array([[1, 1, 1, 0], [1, 1, 1, 0]], bool)
    out = smooth_masks(MaskSet(m, [9, 2]), seg)
    assert out.ids.tolist() == [2] and out.members.sum() == 4


@pytest.mark.parametrize("seed", range(10))
def test_smoothed_masks_are_segment_unions(seed):
    r = np.random.default_rng(seed)
    cloud, gt = blob_cloud(r, r.uniform(0, 1, (3, 3)), n_each=30)
    seg = felzenszwalb_segments(cloud, 6, 0.3, 4)
    noisy = MaskSet(gt.members ^ (r.uniform(size=gt.members.shape) < 0.2), gt.ids, np.ones(len(gt)))
    out = smooth_masks(noisy, seg)
    assert is_union_of_segments(out.members, seg.segment)
    assert not (out.members.sum(axis=0) > 1).any()


def test_postprocess_end_to_end(rng):
    cloud, gt = blob_cloud(rng, [[0, 0, 0], [2, 0, 0]], n_each=40, spread=0.05)
    both = MaskSet(np.ones((1, 80), bool), [0], [0.9])    # one mask spanning two far blobs
    out = postprocess(both, cloud, k_nn=6, fz_k=0.3, min_segment=4, eps=0.3, min_pts=3)
    assert len(out) == 2 and sorted(out.sizes.tolist()) == [40, 40]
    with pytest.raises(ValueError):
        smooth_masks(both, Oversegmentation(np.zeros(3, dtype=np.int64), 1))
