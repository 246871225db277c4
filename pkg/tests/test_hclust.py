import json

import numpy as np
import pytest

from icuclust.compare import ari
from icuclust.hclust import (
    Dendrogram,
    DistanceMatrix,
    agglomerate,
    cut,
    cut_many,
    pairwise_distances,
)

from conftest import naive_agglomerate


def test_pairwise_345_triangle():
    dm = pairwise_distances(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert dm.condensed[0] == pytest.approx(5.0, abs=1e-15)


def test_pairwise_identical_rows():
    dm = pairwise_distances(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))
    assert dm.condensed[0] == 0.0


def test_pairwise_matches_naive_double_loop(rng):
    data = rng.normal(size=(8, 3))
    dm = pairwise_distances(data)
    naive = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            naive[i, j] = np.sqrt(((data[i] - data[j]) ** 2).sum())
    assert np.allclose(dm.square(), naive, atol=1e-12)


def test_pairwise_rejects_non_finite():
    with pytest.raises(ValueError):
        pairwise_distances(np.array([[np.nan, 0.0], [1.0, 2.0]]))


def test_distance_matrix_validation():
    with pytest.raises(ValueError):
        DistanceMatrix(n=3, condensed=np.array([1.0]))
    with pytest.raises(ValueError):
        DistanceMatrix(n=2, condensed=np.array([-0.5]))


def test_upgma_hand_example():
    # 1-D points {0, 1, 10}: merge (0,1) at height 1, then at (9+10)/2
    dm = pairwise_distances(np.array([[0.0], [1.0], [10.0]]))
    tree = agglomerate(dm, "average")
    assert tree.merges[0][0] == 0 and tree.merges[0][1] == 1
    assert tree.merges[0][2] == pytest.approx(1.0, abs=1e-12)
    assert tree.merges[1][2] == pytest.approx(9.5, abs=1e-12)
    assert tree.merges[1][3] == 3


def test_two_identical_points():
    dm = pairwise_distances(np.array([[2.0, 2.0], [2.0, 2.0]]))
    tree = agglomerate(dm, "average")
    assert tree.merges.shape == (1, 4)
    assert tree.merges[0][2] == 0.0


def test_agglomerate_requires_two_items():
    with pytest.raises(ValueError):
        agglomerate(DistanceMatrix(n=1, condensed=np.zeros(0)), "average")
    with pytest.raises(ValueError):
        agglomerate(DistanceMatrix(n=2, condensed=np.array([1.0])), "ward")


@pytest.mark.parametrize("linkage", ["average", "single", "complete"])
def test_matches_naive_oracle(linkage, rng):
    for trial in range(30):
        n = int(rng.integers(2, 11))
        d = int(rng.integers(1, 5))
        data = rng.normal(size=(n, d))
        dm = pairwise_distances(data)
        tree = agglomerate(dm, linkage)
        ks = list(range(1, n + 1))
        square = dm.square()
        oracle_merges, oracle_cuts = naive_agglomerate(square, linkage, snapshot_ks=ks)
        assert np.allclose(tree.merges[:, 2], oracle_merges[:, 2], atol=1e-10)
        assert np.array_equal(tree.merges[:, [0, 1, 3]], oracle_merges[:, [0, 1, 3]])
        for k in ks:
            assert np.array_equal(cut(tree, k).labels, oracle_cuts[k]), (trial, k)


def test_average_heights_monotone(rng):
    for _ in range(20):
        data = rng.normal(size=(40, 4))
        tree = agglomerate(pairwise_distances(data), "average")
        heights = tree.merges[:, 2]
        assert np.all(np.diff(heights) >= -1e-12)


def test_cut_extremes():
    data = np.random.default_rng(0).normal(size=(6, 2))
    tree = agglomerate(pairwise_distances(data), "average")
    whole = cut(tree, 1)
    assert whole.k == 1 and whole.sizes[0] == 6
    singletons = cut(tree, 6)
    assert singletons.k == 6
    assert np.array_equal(singletons.labels, np.arange(6))
    with pytest.raises(ValueError):
        cut(tree, 0)
    with pytest.raises(ValueError):
        cut(tree, 7)


def test_cut_hand_example():
    dm = pairwise_distances(np.array([[0.0], [1.0], [10.0]]))
    part = cut(agglomerate(dm, "average"), 2)
    assert np.array_equal(part.labels, np.array([0, 0, 1]))
    assert np.array_equal(part.sizes, np.array([2, 1]))


def test_cuts_are_nested_refinements(rng):
    data = rng.normal(size=(50, 3))
    tree = agglomerate(pairwise_distances(data), "average")
    parts = cut_many(tree, range(2, 10))
    for k in range(3, 10):
        fine = parts[k].labels
        coarse = parts[k - 1].labels
        # every fine cluster maps into exactly one coarse cluster
        for c in range(parts[k].k):
            owners = np.unique(coarse[fine == c])
            assert len(owners) == 1


def test_permutation_equivariance(rng):
    data = rng.normal(size=(30, 4))
    perm = rng.permutation(30)
    base = cut(agglomerate(pairwise_distances(data), "average"), 4)
    permuted = cut(agglomerate(pairwise_distances(data[perm]), "average"), 4)
    # labels of permuted data at permuted positions describe the same partition
    assert ari(base.labels[perm], permuted.labels) == pytest.approx(1.0)


def test_canonical_labels_first_appearance(rng):
    data = rng.normal(size=(12, 2))
    part = cut(agglomerate(pairwise_distances(data), "average"), 3)
    seen = []
    for lab in part.labels:
        if lab not in seen:
            seen.append(lab)
    assert seen == sorted(seen)
    assert part.labels[0] == 0


def test_dendrogram_json_round_trip(rng):
    data = rng.normal(size=(9, 2))
    tree = agglomerate(pairwise_distances(data), "complete")
    text = tree.to_json()
    clone = Dendrogram.from_json(text)
    assert clone.n_leaves == tree.n_leaves
    assert np.allclose(clone.merges, tree.merges)
    json.loads(text)  # valid JSON


def test_partition_invariants():
    from icuclust.hclust import Partition

    with pytest.raises(ValueError):
        Partition(labels=np.array([0, 0, 0]), k=2)
