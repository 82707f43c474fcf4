"""Admissible / inadmissible block partition of a matrix over two cluster trees."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ClusterTree, node_diameter, node_distance


@dataclass
class BlockPartition:
    """Block partition ``P`` of the index product ``I x J``.

    ``far`` holds admissible pairs ``(t, s)``, ``close`` inadmissible leaf pairs.
    ``far_by_row[t]`` is the admissible set S(t) of row node ``t``;
    ``far_by_col[s]`` is S(s) for column node ``s``.
    """

    far: list[tuple[int, int]]
    close: list[tuple[int, int]]
    far_by_row: list[list[int]]
    far_by_col: list[list[int]]
    eta: float = 0.0


def ball_distance(t, s) -> float:
    """Gap between the balls circumscribing two bounding boxes (may be negative)."""
    centers = 0.5 * (t.lo + t.hi) - 0.5 * (s.lo + s.hi)
    return float(np.linalg.norm(centers)) - 0.5 * (node_diameter(t) + node_diameter(s))


METRICS = ("ball", "box")


def is_admissible(t, s, eta: float, metric: str = "ball") -> bool:
    """``dist > eta * max(diam)``, strict.

    With ``metric="ball"`` (default) ``dist`` is the gap between the balls
    circumscribing the bounding boxes, so ``eta = 0`` asks for disjoint
    balls. ``metric="box"`` uses the box-to-box gap, which at ``eta = 0``
    accepts nearly touching clusters whose blocks are far from low-rank.
    """
    if metric == "ball":
        dist = ball_distance(t, s)
    elif metric == "box":
        dist = node_distance(t, s)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return dist > eta * max(node_diameter(t), node_diameter(s))


def build_partition(row_tree: ClusterTree, col_tree: ClusterTree, eta: float = 0.0,
                    metric: str = "ball") -> BlockPartition:
    """Recursive descent from the root pair; see :func:`is_admissible` for ``metric``."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    far, close = [], []
    stack = [(0, 0)]
    while stack:
        ti, si = stack.pop()
        t, s = row_tree[ti], col_tree[si]
        if is_admissible(t, s, eta, metric):
            far.append((ti, si))
        elif t.is_leaf and s.is_leaf:
            close.append((ti, si))
        elif t.is_leaf:
            stack.extend((ti, sk) for sk in s.sons)
        elif s.is_leaf:
            stack.extend((tk, si) for tk in t.sons)
        else:
            stack.extend((tk, sk) for tk in t.sons for sk in s.sons)

    far.sort(key=lambda p: (row_tree[p[0]].level, p[0], p[1]))
    close.sort()
    far_by_row: list[list[int]] = [[] for _ in range(len(row_tree))]
    far_by_col: list[list[int]] = [[] for _ in range(len(col_tree))]
    for ti, si in far:
        far_by_row[ti].append(si)
        far_by_col[si].append(ti)
    return BlockPartition(far, close, far_by_row, far_by_col, float(eta))


def predecessors(tree: ClusterTree, node_id: int) -> list[int]:
    """Ancestors of a node from its parent up to the root."""
    out = []
    parent = tree[node_id].parent
    while parent is not None:
        out.append(parent)
        parent = tree[parent].parent
    return out
