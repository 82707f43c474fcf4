"""Point sets, bounding boxes and cluster trees built by recursive inertial bisection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PointSet:
    """A cloud of ``count`` points in ``d`` dimensions."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.ndim != 2:
            raise ValueError("coords must be a (count, d) array")
        if not np.all(np.isfinite(coords)):
            raise ValueError("non-finite coordinates")
        object.__setattr__(self, "coords", coords)

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]


@dataclass
class ClusterNode:
    id: int
    start: int
    stop: int
    parent: int | None
    level: int
    lo: np.ndarray
    hi: np.ndarray
    sons: tuple[int, ...] = ()
    # set when the split fell back to halving the current ordering
    degenerate: bool = False

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def is_leaf(self) -> bool:
        return not self.sons


@dataclass
class ClusterTree:
    """Binary cluster tree over a point set.

    ``perm[k]`` is the original index of the point sitting at tree-order
    position ``k``; every node owns the contiguous slice ``perm[start:stop]``.
    Node ids follow depth-first pre-order, so the root is node 0.
    """

    nodes: list[ClusterNode]
    perm: np.ndarray
    points: np.ndarray = field(repr=False)

    @property
    def root(self) -> ClusterNode:
        return self.nodes[0]

    @property
    def level_count(self) -> int:
        return max(n.level for n in self.nodes)

    @property
    def count(self) -> int:
        return self.perm.size

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> ClusterNode:
        return self.nodes[node_id]

    def indices(self, node_id: int) -> np.ndarray:
        """Original indices owned by a node."""
        node = self.nodes[node_id]
        return self.perm[node.start:node.stop]

    def inverse_perm(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv

    def leaves(self) -> list[int]:
        return [n.id for n in self.nodes if n.is_leaf]

    def levels(self) -> list[list[int]]:
        """Node ids grouped by level; ``levels()[0]`` is the root level."""
        out: list[list[int]] = [[] for _ in range(self.level_count)]
        for n in self.nodes:
            out[n.level - 1].append(n.id)
        return out


def _bbox(pts):
    return pts.min(axis=0), pts.max(axis=0)


def _inertial_split(pts, orig):
    """Return the local ordering and split position for one node, or None if degenerate."""
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered
    w, v = np.linalg.eigh(cov)
    if w[-1] <= 1e-300 or not np.any(np.abs(centered) > 0):
        return None
    axis = v[:, -1]
    # fix the eigenvector sign so the split is reproducible across LAPACK builds
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    proj = centered @ axis
    order = np.lexsort((orig, proj))
    return order


def build_cluster_tree(points, block_size: int = 50) -> ClusterTree:
    """Recursive inertial bisection.

    A node is split only if it holds more than ``block_size`` points. The
    cut is the median of the projections onto the principal inertia axis,
    ties broken by original index. Coincident point clouds are halved in
    their current order.
    """
    if not isinstance(points, PointSet):
        points = PointSet(np.asarray(points, dtype=float))
    if points.count < 1:
        raise ValueError("empty input")
    if block_size < 1:
        raise ValueError("block_size must be positive")

    coords = points.coords
    perm = np.arange(points.count)
    nodes: list[ClusterNode] = []

    def build(start, stop, parent, level):
        idx = perm[start:stop]
        lo, hi = _bbox(coords[idx])
        node = ClusterNode(len(nodes), start, stop, parent, level, lo, hi)
        nodes.append(node)
        size = stop - start
        if size <= block_size:
            return node.id
        order = _inertial_split(coords[idx], idx)
        if order is None:
            node.degenerate = True
        else:
            perm[start:stop] = idx[order]
        mid = start + size // 2
        left = build(start, mid, node.id, level + 1)
        right = build(mid, stop, node.id, level + 1)
        node.sons = (left, right)
        return node.id

    # recursion depth is O(log N) thanks to the median split
    build(0, points.count, None, 1)
    return ClusterTree(nodes, perm, coords)


def node_diameter(node: ClusterNode) -> float:
    """Length of the bounding-box diagonal."""
    return float(np.linalg.norm(node.hi - node.lo))


def node_distance(a: ClusterNode, b: ClusterNode) -> float:
    """Euclidean distance between two bounding boxes, 0 when they touch or overlap."""
    gap = np.maximum(0.0, np.maximum(a.lo - b.hi, b.lo - a.hi))
    return float(np.linalg.norm(gap))
