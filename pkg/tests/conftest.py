import numpy as np
import pytest

from h2nc import build_cluster_tree, build_partition, coulomb_oracle, random_particles


def box_node(lo, hi, node_id=0):
    from h2nc.geometry import ClusterNode

    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    return ClusterNode(node_id, 0, 1, None, 1, lo, hi)


@pytest.fixture(scope="session")
def small_coulomb():
    """600 particles, block_size 25: oracle, tree, partition and the dense matrix."""
    system = random_particles(600, seed=3)
    oracle = coulomb_oracle(system)
    tree = build_cluster_tree(system.points, 25)
    part = build_partition(tree, tree, 0.0)
    return oracle, tree, part, oracle.dense()


def far_mask(h2):
    """Boolean matrix marking entries covered by far blocks."""
    n, m = h2.shape
    mask = np.zeros((n, m), dtype=bool)
    for t, s in h2.partition.far:
        mask[np.ix_(h2.row_tree.indices(t), h2.col_tree.indices(s))] = True
    return mask


def check_h2_invariants(h2, oracle=None):
    """Nestedness, transfer identity rows, block shapes and (optionally) interaction values."""
    for tree, bases in ((h2.row_tree, h2.row_bases), (h2.col_tree, h2.col_bases)):
        for node in tree.nodes:
            b = bases[node.id]
            if node.is_leaf:
                cand = tree.indices(node.id)
            else:
                cand = np.concatenate([bases[k].indices for k in node.sons])
            assert b.transfer.shape == (cand.size, b.indices.size)
            assert np.isin(b.indices, cand).all()
            if b.indices.size:
                pos = np.array([np.flatnonzero(cand == i)[0] for i in b.indices])
                assert np.allclose(b.transfer[pos], np.eye(b.indices.size), atol=1e-12, rtol=0)
    for (t, s), block in h2.interaction.items():
        assert block.shape == (h2.row_bases[t].indices.size, h2.col_bases[s].indices.size)
        if oracle is not None:
            assert np.array_equal(block, oracle.eval_block(h2.row_bases[t].indices, h2.col_bases[s].indices))
    for (t, s), block in h2.close.items():
        assert block.shape == (h2.row_tree[t].size, h2.col_tree[s].size)
