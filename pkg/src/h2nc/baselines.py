"""Geometric nested cross approximation: far fields sampled on Chebyshev proxy grids.

Each node's far field is represented by tensor Chebyshev grids placed in the
bounding boxes of the clusters it interacts with (its own far list plus those
of its predecessors). A single bottom-up pass picks basis indices against
those proxies, so no representor sets are ever refined.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .densecore import CountingOracle, MatrixOracle
from .geometry import ClusterNode, ClusterTree
from .h2 import BuildStats, H2Matrix, assemble_h2
from .mcbh import upward_sweep
from .partition import BlockPartition, predecessors


@dataclass(frozen=True)
class ProxyGrid:
    node: int
    points: np.ndarray

    @property
    def points_per_node(self) -> int:
        return len(self.points)


def chebyshev_nodes(m: int) -> np.ndarray:
    """Chebyshev-Gauss nodes ``cos((2k+1) pi / 2m)`` on [-1, 1], ascending."""
    if m < 1:
        raise ValueError("m must be at least 1")
    k = np.arange(m)
    return np.sort(np.cos((2 * k + 1) * np.pi / (2 * m)))


def chebyshev_proxies(node: ClusterNode, m: int) -> ProxyGrid:
    """Tensor grid of Chebyshev nodes mapped into ``node``'s bounding box.

    A zero-width axis contributes only its midpoint.
    """
    ref = chebyshev_nodes(m)
    axes = []
    for lo, hi in zip(node.lo, node.hi):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        axes.append(np.array([mid]) if half == 0 else mid + half * ref)
    pts = np.array(list(itertools.product(*axes)), dtype=float)
    return ProxyGrid(node.id, pts)


def _zone_proxies(tree: ClusterTree, opposite: ClusterTree, far_lists, m: int):
    """Proxy points covering the far zone of every node of ``tree``."""
    grids = {}

    def grid(k):
        if k not in grids:
            grids[k] = chebyshev_proxies(opposite[k], m).points
        return grids[k]

    out = []
    for node in tree.nodes:
        zone = list(far_lists[node.id])
        for p in predecessors(tree, node.id):
            zone.extend(far_lists[p])
        if zone:
            out.append(np.concatenate([grid(k) for k in sorted(set(zone))]))
        else:
            out.append(np.zeros((0, opposite.points.shape[1])))
    return out


def acageo_build(oracle: MatrixOracle, row_tree: ClusterTree, col_tree: ClusterTree,
                 partition: BlockPartition, tau: float, m: int = 3) -> H2Matrix:
    """H2 approximation whose bases are chosen against Chebyshev proxy grids.

    ``oracle`` must provide ``source_proxy_block(rows, pts)`` (real rows,
    proxy sources) and ``receiver_proxy_block(pts, cols)`` (proxy receivers,
    real columns). Proxy kernel evaluations are counted with the entries.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if m < 1:
        raise ValueError("m must be at least 1")
    counter = CountingOracle(oracle)
    proxy_entries = 0
    start = time.perf_counter()
    tol = tau / max(row_tree.level_count, col_tree.level_count)
    row_zone = _zone_proxies(row_tree, col_tree, partition.far_by_row, m)
    col_zone = _zone_proxies(col_tree, row_tree, partition.far_by_col, m)

    def col_block(s, cols, _row_bases):
        nonlocal proxy_entries
        pts = col_zone[s]
        if not len(pts) or not cols.size:
            return np.zeros((0, cols.size))
        block = oracle.receiver_proxy_block(pts, cols)
        proxy_entries += block.size
        return block

    def row_block(t, rows, _col_bases):
        nonlocal proxy_entries
        pts = row_zone[t]
        if not len(pts) or not rows.size:
            return np.zeros((rows.size, 0))
        block = oracle.source_proxy_block(rows, pts)
        proxy_entries += block.size
        return block

    bases = upward_sweep(row_tree, col_tree, partition, tol, col_block, row_block)
    h2 = assemble_h2(counter, row_tree, col_tree, partition, bases.row, bases.col)
    h2.stats = BuildStats(time_s=time.perf_counter() - start, entries=counter.entries + proxy_entries,
                          iterations=0, method="acageo", tau=tau)
    return h2
