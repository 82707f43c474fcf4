"""Nested cross approximation with iteratively refined representor sets (MCBH).

Bases are built bottom-up, one level at a time, column tree before row tree.
Each node's candidate far-field set is assembled from the bases already
available on the opposite tree plus an inherited *predecessors part*. The
downward pass resamples those candidates into compact representor sets,
which are then handed to the children for the next upward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import lapack

from .densecore import CountingOracle, MatrixOracle, RankDeficiencyError, maxvol, truncated_svd
from .geometry import ClusterTree
from .h2 import BuildStats, H2Matrix, assemble_h2
from .partition import BlockPartition

EMPTY = np.zeros(0, dtype=np.intp)


@dataclass
class Basis:
    """Basis index set of one node and its transfer matrix.

    For a leaf, ``transfer`` is ``|t| x |basis|``; for an inner node it is
    ``(|basis(t1)| + |basis(t2)|) x |basis|`` against the stacked son bases.
    """

    node: int
    indices: np.ndarray
    transfer: np.ndarray

    @property
    def rank(self) -> int:
        return self.indices.size


@dataclass
class NestedBases:
    row: list[Basis]
    col: list[Basis]


@dataclass
class RepresentorSet:
    node: int
    indices: np.ndarray
    predecessors_part: np.ndarray


def _union(parts) -> np.ndarray:
    parts = [p for p in parts if p.size]
    if not parts:
        return EMPTY
    return np.unique(np.concatenate(parts))


def _empty_basis(node, n):
    return Basis(node, EMPTY, np.zeros((n, 0)))


def _son_stack(tree, bases, node_id, fallback=None):
    """Stacked son bases of an inner node, or the node's own index set for a leaf."""
    node = tree[node_id]
    if node.is_leaf:
        return tree.indices(node_id) if fallback is None else fallback
    return np.concatenate([bases[k].indices for k in node.sons])


def _square_up(block: np.ndarray) -> np.ndarray:
    """Triangular factor with the singular values and right singular vectors of a tall block."""
    n, m = block.shape
    if n <= 2 * m:
        return block
    # geqrf directly: only the leading m x m triangle is needed
    qr, _, _, info = lapack.dgeqrf(block)
    if info != 0:
        raise np.linalg.LinAlgError(f"QR failed with info={info}")
    return np.triu(qr[:m])


def compress_rows(block: np.ndarray, rows: np.ndarray, node: int, tol: float) -> Basis:
    """Basis rows of ``block`` (rows labelled by ``rows``) via truncated SVD + maxvol on U."""
    u, _, _ = truncated_svd(_square_up(block.T).T, tol)
    if u.shape[1] == 0:
        return _empty_basis(node, rows.size)
    mv = maxvol(u)
    return Basis(node, rows[mv.selected], mv.coefficients)


def compress_cols(block: np.ndarray, cols: np.ndarray, node: int, tol: float) -> Basis:
    """Basis columns of ``block`` via truncated SVD + maxvol on the right factor."""
    _, _, v = truncated_svd(_square_up(block), tol)
    if v.shape[0] == 0:
        return _empty_basis(node, cols.size)
    mv = maxvol(v.T)
    return Basis(node, cols[mv.selected], mv.coefficients)


def has_block_row(tree: ClusterTree, far_lists) -> list[bool]:
    """Whether the block row (node plus predecessors' far zones) of each node is nonempty."""
    out = [False] * len(tree)
    for level_nodes in tree.levels():
        for k in level_nodes:
            parent = tree[k].parent
            out[k] = bool(far_lists[k]) or (parent is not None and out[parent])
    return out


def _node_basis(block, labels, node, tol, live, compress):
    if block.size:
        return compress(block, labels, node, tol)
    if live and labels.size:
        # nothing sampled here but an ancestor still needs these rows: keep them all
        return Basis(node, labels, np.eye(labels.size))
    return _empty_basis(node, labels.size)


def upward_sweep(row_tree: ClusterTree, col_tree: ClusterTree, partition: BlockPartition,
                 tol: float, col_block: Callable, row_block: Callable) -> NestedBases:
    """Level-by-level bottom-up basis construction.

    ``col_block(s, cols, row_bases)`` returns the sampled matrix whose columns
    are labelled by ``cols``; ``row_block(t, rows, col_bases)`` likewise for
    rows. Unfinished entries of the basis lists are ``None``. A node with no
    samples keeps its whole candidate set when an ancestor has a far zone,
    and gets an empty basis otherwise.
    """
    row_live = has_block_row(row_tree, partition.far_by_row)
    col_live = has_block_row(col_tree, partition.far_by_col)
    row_bases: list[Basis | None] = [None] * len(row_tree)
    col_bases: list[Basis | None] = [None] * len(col_tree)
    row_levels = row_tree.levels()
    col_levels = col_tree.levels()
    depth = max(len(row_levels), len(col_levels))
    for level in range(depth, 0, -1):
        for s in (col_levels[level - 1] if level <= len(col_levels) else ()):
            cols = _son_stack(col_tree, col_bases, s)
            block = col_block(s, cols, row_bases)
            col_bases[s] = _node_basis(block, cols, s, tol, col_live[s], compress_cols)
        for t in (row_levels[level - 1] if level <= len(row_levels) else ()):
            rows = _son_stack(row_tree, row_bases, t)
            block = row_block(t, rows, col_bases)
            row_bases[t] = _node_basis(block, rows, t, tol, row_live[t], compress_rows)
    return NestedBases(row_bases, col_bases)


def _far_candidates(tree, bases, node_ids):
    """Opposite-side candidate indices for a far list, using whatever bases exist yet."""
    parts = []
    for k in node_ids:
        if bases[k] is not None:
            parts.append(bases[k].indices)
        else:
            parts.append(_son_stack(tree, bases, k))
    return parts


def upward_pass(row_tree: ClusterTree, col_tree: ClusterTree, partition: BlockPartition,
                oracle: MatrixOracle, predecessor_sets=None, tol: float = 1e-6) -> NestedBases:
    """Bases and transfer matrices for both trees given predecessors parts.

    ``predecessor_sets`` is ``(row_parts, col_parts)``, lists of index arrays
    per node, or ``None`` for the all-empty start.
    """
    if predecessor_sets is None:
        row_pp = [EMPTY] * len(row_tree)
        col_pp = [EMPTY] * len(col_tree)
    else:
        row_pp, col_pp = predecessor_sets

    def col_block(s, cols, row_bases):
        psi = _union([col_pp[s]] + _col_side_candidates(s, row_bases))
        return oracle.eval_block(psi, cols)

    def _col_side_candidates(s, row_bases):
        parts = []
        for t in partition.far_by_col[s]:
            node = row_tree[t]
            if node.is_leaf:
                b = row_bases[t]
                parts.append(b.indices if b is not None else row_tree.indices(t))
            else:
                parts.append(_son_stack(row_tree, row_bases, t))
        return parts

    def row_block(t, rows, col_bases):
        psi = _union([row_pp[t]] + _far_candidates(col_tree, col_bases, partition.far_by_row[t]))
        return oracle.eval_block(rows, psi)

    return upward_sweep(row_tree, col_tree, partition, tol, col_block, row_block)


def _select_columns(block: np.ndarray, r: int) -> np.ndarray:
    """Positions of (at most) ``r`` dominant columns of a short-wide block."""
    tall = block.T
    try:
        return maxvol(tall).selected
    except RankDeficiencyError:
        u, _, _ = truncated_svd(tall, 1e-14)
        return maxvol(u).selected if u.shape[1] else EMPTY


def downward_pass(tree: ClusterTree, opposite_tree: ClusterTree, partition: BlockPartition,
                  oracle: MatrixOracle, bases: NestedBases, side: str = "row") -> list[RepresentorSet]:
    """Top-down resampling of far-field candidates into representor sets.

    ``side`` says whether ``tree`` is the row tree (representors are column
    indices) or the column tree (representors are row indices).
    """
    if side == "row":
        own, other, far = bases.row, bases.col, partition.far_by_row

        def sample(basis, psi):
            return oracle.eval_block(basis, psi)
    elif side == "col":
        own, other, far = bases.col, bases.row, partition.far_by_col

        def sample(basis, psi):
            return oracle.eval_block(psi, basis).T
    else:
        raise ValueError("side must be 'row' or 'col'")

    reps: list[RepresentorSet | None] = [None] * len(tree)
    for level_nodes in tree.levels():
        for t in level_nodes:
            parent = tree[t].parent
            inherited = EMPTY if parent is None else reps[parent].indices
            psi = _union([inherited] + [other[s].indices for s in far[t]])
            basis = own[t].indices
            if basis.size == 0:
                phi = EMPTY
            elif psi.size <= basis.size:
                phi = psi
            else:
                phi = np.sort(psi[_select_columns(sample(basis, psi), basis.size)])
            reps[t] = RepresentorSet(t, phi, inherited)
    return reps


def shift_to_predecessors(representor_sets: list[RepresentorSet], tree: ClusterTree) -> list[np.ndarray]:
    """Each node inherits its parent's full representor set; the root gets nothing."""
    out = []
    for node in tree.nodes:
        out.append(EMPTY if node.parent is None else representor_sets[node.parent].indices)
    return out


def mcbh_iterate(oracle: MatrixOracle, row_tree: ClusterTree, col_tree: ClusterTree,
                 partition: BlockPartition, tau: float, iterations: int = 1):
    """Yield ``(iteration, bases)`` after the initial pass and after every refinement."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    tol = tau / max(row_tree.level_count, col_tree.level_count)
    bases = upward_pass(row_tree, col_tree, partition, oracle, None, tol)
    yield 0, bases
    for it in range(1, iterations + 1):
        row_reps = downward_pass(row_tree, col_tree, partition, oracle, bases, "row")
        col_reps = downward_pass(col_tree, row_tree, partition, oracle, bases, "col")
        preds = (shift_to_predecessors(row_reps, row_tree), shift_to_predecessors(col_reps, col_tree))
        bases = upward_pass(row_tree, col_tree, partition, oracle, preds, tol)
        yield it, bases


def mcbh_build(oracle: MatrixOracle, row_tree: ClusterTree, col_tree: ClusterTree,
               partition: BlockPartition, tau: float, iterations: int = 1,
               callback: Callable | None = None) -> H2Matrix:
    """Build an H2 approximation from matrix entries.

    Iteration 0 is the plain bottom-up pass with empty predecessors parts.
    ``callback(iteration, bases)`` runs after every pass; its run time and any
    entries it evaluates are excluded from the build statistics.
    """
    counter = CountingOracle(oracle)
    elapsed = 0.0
    start = time.perf_counter()
    bases = None
    for it, bases in mcbh_iterate(counter, row_tree, col_tree, partition, tau, iterations):
        if callback is not None:
            elapsed += time.perf_counter() - start
            callback(it, bases)
            start = time.perf_counter()
    h2 = assemble_h2(counter, row_tree, col_tree, partition, bases.row, bases.col)
    elapsed += time.perf_counter() - start
    h2.stats = BuildStats(time_s=elapsed, entries=counter.entries, iterations=iterations,
                          method="mcbh", tau=tau)
    return h2
