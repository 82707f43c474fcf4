import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h2nc import PointSet, build_cluster_tree, node_diameter, node_distance
from conftest import box_node


def uniform(n, seed=0, d=3):
    return np.random.default_rng(seed).random((n, d))


def test_pointset_validates():
    assert PointSet(np.zeros((4, 3))).count == 4
    with pytest.raises(ValueError):
        PointSet(np.array([[0.0, np.nan, 1.0]]))


def test_empty_input_rejected():
    with pytest.raises(ValueError, match="empty input"):
        build_cluster_tree(np.zeros((0, 3)), 50)


def test_hundred_points_split_once():
    tree = build_cluster_tree(uniform(100), 50)
    root = tree.root
    assert len(root.sons) == 2
    sizes = [tree[k].size for k in root.sons]
    assert all(tree[k].is_leaf for k in root.sons)
    assert all(1 <= s <= 99 for s in sizes) and sum(sizes) == 100


def test_small_cloud_single_leaf():
    tree = build_cluster_tree(uniform(10), 50)
    assert len(tree) == 1 and tree.level_count == 1 and tree.root.is_leaf


def test_thousand_points_leaves_tile():
    pts = uniform(1000, seed=1)
    tree = build_cluster_tree(pts, 50)
    seen = np.concatenate([tree.indices(k) for k in tree.leaves()])
    assert all(tree[k].size <= 50 for k in tree.leaves())
    assert np.array_equal(np.sort(seen), np.arange(1000))


def test_median_split_balances_sons():
    tree = build_cluster_tree(uniform(101, seed=4), 10)
    for node in tree.nodes:
        if node.sons:
            a, b = (tree[k].size for k in node.sons)
            assert abs(a - b) <= 1


def test_split_follows_principal_axis():
    # elongated along y: the first cut separates low y from high y
    rng = np.random.default_rng(2)
    pts = rng.random((200, 3)) * [0.1, 10.0, 0.1]
    tree = build_cluster_tree(pts, 50)
    left, right = tree.root.sons
    assert pts[tree.indices(left), 1].max() <= pts[tree.indices(right), 1].min()


def test_coincident_points_fall_back_to_halving():
    tree = build_cluster_tree(np.ones((40, 3)), 8)
    assert tree.root.degenerate
    assert all(tree[k].size <= 8 for k in tree.leaves())


def test_ties_broken_by_index():
    # all points share the projection except one axis pattern; build twice, same tree
    pts = np.repeat(np.eye(3), 20, axis=0)
    a = build_cluster_tree(pts, 5)
    b = build_cluster_tree(pts.copy(), 5)
    assert np.array_equal(a.perm, b.perm)


def test_diameter_examples():
    assert node_diameter(box_node([0, 0, 0], [1, 1, 1])) == pytest.approx(math.sqrt(3))
    assert node_diameter(box_node([2, 2, 2], [2, 2, 2])) == 0.0
    assert node_diameter(box_node([0, 0, 0], [3, 4, 0])) == pytest.approx(5.0)


def test_distance_examples():
    unit = box_node([0, 0, 0], [1, 1, 1])
    assert node_distance(unit, box_node([2, 2, 2], [3, 3, 3])) == pytest.approx(math.sqrt(3))
    assert node_distance(box_node([0, 0, 0], [1, 0, 0]), box_node([2, 0, 0], [3, 0, 0])) == 1.0
    assert node_distance(unit, box_node([1, 1, 1], [2, 2, 2])) == 0.0
    flat = box_node([0, 0, 0], [1, 1, 0])
    assert node_distance(flat, box_node([3, 5, 0], [4, 6, 0])) == pytest.approx(math.sqrt(20))


def test_axis_gap_distance():
    # [0,1]^3 vs [2,3]^3 differ on all three axes; along one axis the gap is 1
    assert node_distance(box_node([0, 0, 0], [1, 1, 1]), box_node([2, 0, 0], [3, 1, 1])) == 1.0


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 400), block=st.integers(1, 60), seed=st.integers(0, 2**32 - 1),
       d=st.integers(1, 3))
def test_tree_invariants(n, block, seed, d):
    pts = uniform(n, seed, d)
    tree = build_cluster_tree(pts, block)
    assert tree.root.start == 0 and tree.root.stop == n
    assert np.array_equal(np.sort(tree.perm), np.arange(n))
    inv = tree.inverse_perm()
    assert np.array_equal(tree.perm[inv], np.arange(n))
    for node in tree.nodes:
        own = pts[tree.indices(node.id)]
        assert np.all(own >= node.lo - 1e-15) and np.all(own <= node.hi + 1e-15)
        if node.sons:
            a, b = (tree[k] for k in node.sons)
            assert a.level == b.level == node.level + 1
            assert a.start == node.start and a.stop == b.start and b.stop == node.stop
            assert a.size >= 1 and b.size >= 1
        else:
            assert node.size <= block or node.degenerate
    assert tree.level_count == max(nd.level for nd in tree.nodes)
