"""H2-matrix container: storage, fast application, memory accounting,
far-field error estimation and the binary file format."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import ClusterNode, ClusterTree
from .partition import BlockPartition

MAGIC = b"H2NC\x01"
SCALAR_BYTES = 8


@dataclass
class BuildStats:
    time_s: float = 0.0
    entries: int = 0
    iterations: int = 0
    method: str = "mcbh"
    tau: float = 0.0


@dataclass
class H2Matrix:
    row_tree: ClusterTree
    col_tree: ClusterTree
    partition: BlockPartition
    row_bases: list
    col_bases: list
    interaction: dict[tuple[int, int], np.ndarray]
    close: dict[tuple[int, int], np.ndarray]
    stats: BuildStats = field(default_factory=BuildStats)
    _plan: dict | None = field(default=None, repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.row_tree.count, self.col_tree.count

    @property
    def dtype(self):
        for block in self.close.values():
            return block.dtype
        return np.dtype(np.float64)

    @property
    def mean_rank(self) -> float:
        """Average basis size over nodes with a nonempty basis, both trees."""
        ranks = [b.indices.size for b in self.row_bases + self.col_bases if b.indices.size]
        return float(np.mean(ranks)) if ranks else 0.0

    # -- application ------------------------------------------------------

    def _offsets(self, bases):
        off = np.zeros(len(bases) + 1, dtype=np.intp)
        off[1:] = np.cumsum([b.indices.size for b in bases])
        return off

    def _build_plan(self):
        row_off = self._offsets(self.row_bases)
        col_off = self._offsets(self.col_bases)
        ri, ci, vals = [], [], []
        for (t, s), block in self.interaction.items():
            if block.size == 0:
                continue
            a, b = np.meshgrid(np.arange(block.shape[0]), np.arange(block.shape[1]), indexing="ij")
            ri.append((row_off[t] + a).ravel())
            ci.append((col_off[s] + b).ravel())
            vals.append(block.ravel())
        far = _coo(ri, ci, vals, (row_off[-1], col_off[-1]), self.dtype)
        ri, ci, vals = [], [], []
        for (t, s), block in self.close.items():
            rows = self.row_tree.indices(t)
            cols = self.col_tree.indices(s)
            ri.append(np.repeat(rows, cols.size))
            ci.append(np.tile(cols, rows.size))
            vals.append(block.ravel())
        close = _coo(ri, ci, vals, self.shape, self.dtype)
        self._plan = {
            "row_off": row_off,
            "col_off": col_off,
            "far": far,
            "far_t": far.T.tocsr(),
            "close": close,
            "close_t": close.T.tocsr(),
            "row_up": _bottom_up(self.row_tree),
            "col_up": _bottom_up(self.col_tree),
        }
        return self._plan

    @property
    def plan(self):
        return self._plan if self._plan is not None else self._build_plan()

    def _gather(self, tree, bases, off, order, x):
        """Bottom-up coefficient accumulation ``c_s = M_s^T [x_s or stacked son coefficients]``."""
        c = np.zeros((off[-1], x.shape[1]), dtype=np.result_type(x, self.dtype))
        for k in order:
            b = bases[k]
            if b.rank == 0:
                continue
            node = tree[k]
            if node.is_leaf:
                local = x[tree.indices(k)]
            else:
                local = np.concatenate([c[off[j]:off[j + 1]] for j in node.sons])
            c[off[k]:off[k + 1]] = b.transfer.T @ local
        return c

    def _scatter(self, tree, bases, off, order, d, n):
        """Top-down distribution of node coefficients through the transfer matrices."""
        y = np.zeros((n, d.shape[1]), dtype=d.dtype)
        for k in reversed(order):
            b = bases[k]
            if b.rank == 0:
                continue
            node = tree[k]
            local = b.transfer @ d[off[k]:off[k + 1]]
            if node.is_leaf:
                y[tree.indices(k)] += local
            else:
                pos = 0
                for j in node.sons:
                    size = off[j + 1] - off[j]
                    d[off[j]:off[j + 1]] += local[pos:pos + size]
                    pos += size
        return y

    def far_matvec(self, x):
        x, flat = _as_columns(x, self.shape[1])
        p = self.plan
        c = self._gather(self.col_tree, self.col_bases, p["col_off"], p["col_up"], x)
        d = p["far"] @ c
        y = self._scatter(self.row_tree, self.row_bases, p["row_off"], p["row_up"], d, self.shape[0])
        return y[:, 0] if flat else y

    def far_rmatvec(self, y):
        y, flat = _as_columns(y, self.shape[0])
        p = self.plan
        c = self._gather(self.row_tree, self.row_bases, p["row_off"], p["row_up"], y)
        d = p["far_t"] @ c
        x = self._scatter(self.col_tree, self.col_bases, p["col_off"], p["col_up"], d, self.shape[1])
        return x[:, 0] if flat else x

    def close_matvec(self, x):
        return self.plan["close"] @ x

    def close_rmatvec(self, y):
        return self.plan["close_t"] @ y

    def matvec(self, x):
        x = np.asarray(x)
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"vector length {x.shape[0]} != column count {self.shape[1]}")
        return self.far_matvec(x) + self.close_matvec(x)

    def rmatvec(self, y):
        y = np.asarray(y)
        if y.shape[0] != self.shape[0]:
            raise ValueError(f"vector length {y.shape[0]} != row count {self.shape[0]}")
        return self.far_rmatvec(y) + self.close_rmatvec(y)

    __matmul__ = matvec

    def to_dense(self) -> np.ndarray:
        return self.matvec(np.eye(self.shape[1]))

    def memory_bytes(self) -> tuple[int, int]:
        return memory_bytes(self)

    def save(self, path):
        save_h2(self, path)


def _bottom_up(tree):
    return sorted(range(len(tree)), key=lambda k: -tree[k].level)


def _as_columns(x, n):
    x = np.asarray(x)
    if x.shape[0] != n:
        raise ValueError(f"vector length {x.shape[0]} != {n}")
    return (x[:, None], True) if x.ndim == 1 else (x, False)


def _coo(ri, ci, vals, shape, dtype):
    if not vals:
        return sp.csr_matrix(shape, dtype=dtype)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))), shape=shape
    )


def assemble_h2(oracle, row_tree, col_tree, partition, row_bases, col_bases) -> H2Matrix:
    """Interaction matrices on basis crosses for far pairs, dense blocks for close pairs."""
    interaction = {
        (t, s): oracle.eval_block(row_bases[t].indices, col_bases[s].indices)
        for t, s in partition.far
    }
    close = {
        (t, s): oracle.eval_block(row_tree.indices(t), col_tree.indices(s))
        for t, s in partition.close
    }
    return H2Matrix(row_tree, col_tree, partition, list(row_bases), list(col_bases), interaction, close)


def memory_bytes(h2: H2Matrix) -> tuple[int, int]:
    """``(far_bytes, close_bytes)``: transfer plus interaction payload, and dense close blocks."""
    far = sum(b.transfer.size for b in h2.row_bases)
    if h2.col_bases is not h2.row_bases:
        far += sum(b.transfer.size for b in h2.col_bases)
    far += sum(m.size for m in h2.interaction.values())
    close = sum(m.size for m in h2.close.values())
    return far * SCALAR_BYTES, close * SCALAR_BYTES


def far_field_error(h2: H2Matrix, oracle, power_iters: int = 30, seed: int = 0,
                    rtol: float = 1e-4) -> float:
    """Relative spectral error of the far-field part, ``||A_far - H_far|| / ||A_far||``.

    Both norms come from power iteration on the normal operator, run side by
    side so every dense pass through the oracle serves both. Close blocks are
    stored exactly, so ``A_far x = A x - close x``. Iteration stops early once
    both estimates move by less than ``rtol`` relative.
    """
    if power_iters < 2:
        raise ValueError("power_iters must be at least 2")
    n, m = h2.shape
    if not h2.partition.far:
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((m, 2))
    v /= np.linalg.norm(v, axis=0)

    def forward(v):
        exact = oracle.matmat(v) - h2.close_matvec(v)
        exact[:, 0] -= h2.far_matvec(v[:, 0])
        return exact

    def backward(u):
        exact = oracle.rmatmat(u) - h2.close_rmatvec(u)
        exact[:, 0] -= h2.far_rmatvec(u[:, 0])
        return exact

    prev = np.zeros(2)
    for _ in range(power_iters):
        u = forward(v)
        sigma = np.linalg.norm(u, axis=0)
        if np.all(np.abs(sigma - prev) <= rtol * sigma):
            break
        prev = sigma
        w = backward(u)
        norms = np.linalg.norm(w, axis=0)
        if np.any(norms == 0):
            # a zero operator; keep the last direction for the other column
            norms[norms == 0] = 1.0
        v = w / norms
    else:
        sigma = np.linalg.norm(forward(v), axis=0)
    if sigma[1] == 0:
        return 0.0
    return float(sigma[0] / sigma[1])


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

_DTYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8"), b"c": np.dtype("<c16"), b"u": np.dtype("u1")}
_TAGS = {np.dtype("<f8"): b"f", np.dtype("<i8"): b"i", np.dtype("<c16"): b"c", np.dtype("u1"): b"u"}


def _write_array(fh, a):
    a = np.asarray(a)
    if a.dtype.kind == "f":
        a = a.astype("<f8")
    elif a.dtype.kind in "iub" and a.dtype != np.dtype("u1"):
        a = a.astype("<i8")
    elif a.dtype.kind == "c":
        a = a.astype("<c16")
    fh.write(_TAGS[a.dtype])
    fh.write(struct.pack("<B", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(np.ascontiguousarray(a).tobytes())


def _read_array(fh):
    tag = fh.read(1)
    if tag not in _DTYPES:
        raise ValueError(f"corrupt H2 file: bad array tag {tag!r}")
    dtype = _DTYPES[tag]
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = fh.read(count * dtype.itemsize)
    if len(data) != count * dtype.itemsize:
        raise ValueError("corrupt H2 file: truncated array")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def _write_tree(fh, tree: ClusterTree):
    table = np.array([
        [n.start, n.stop, -1 if n.parent is None else n.parent, n.level,
         n.sons[0] if n.sons else -1, n.sons[1] if n.sons else -1, int(n.degenerate)]
        for n in tree.nodes
    ], dtype=np.int64)
    _write_array(fh, tree.perm)
    _write_array(fh, table)
    _write_array(fh, np.array([n.lo for n in tree.nodes]))
    _write_array(fh, np.array([n.hi for n in tree.nodes]))
    _write_array(fh, tree.points)


def _read_tree(fh) -> ClusterTree:
    perm = _read_array(fh)
    table = _read_array(fh)
    lo = _read_array(fh)
    hi = _read_array(fh)
    points = _read_array(fh)
    nodes = []
    for k, (start, stop, parent, level, s1, s2, deg) in enumerate(table):
        nodes.append(ClusterNode(
            k, int(start), int(stop), None if parent < 0 else int(parent), int(level),
            lo[k], hi[k], () if s1 < 0 else (int(s1), int(s2)), bool(deg),
        ))
    return ClusterTree(nodes, perm.astype(np.intp), points)


def save_h2(h2: H2Matrix, path):
    """Write the container; build time is left out so identical builds give identical bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    same = h2.col_tree is h2.row_tree
    _write_array(buf, np.array([h2.shape[0], h2.shape[1], h2.stats.iterations, h2.stats.entries, int(same)]))
    _write_array(buf, np.array([h2.partition.eta, h2.stats.tau]))
    _write_array(buf, np.frombuffer(h2.stats.method.encode(), dtype=np.uint8))
    _write_tree(buf, h2.row_tree)
    if not same:
        _write_tree(buf, h2.col_tree)
    _write_array(buf, np.array(h2.partition.far, dtype=np.int64).reshape(-1, 2))
    _write_array(buf, np.array(h2.partition.close, dtype=np.int64).reshape(-1, 2))
    for bases in (h2.row_bases, h2.col_bases):
        for b in bases:
            _write_array(buf, b.indices)
            _write_array(buf, b.transfer)
    for key in h2.partition.far:
        _write_array(buf, h2.interaction[key])
    for key in h2.partition.close:
        _write_array(buf, h2.close[key])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_h2(path) -> H2Matrix:
    from .mcbh import Basis

    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an H2NC version 1 file")
        n, m, iterations, entries, same = (int(v) for v in _read_array(fh))
        eta, tau = (float(v) for v in _read_array(fh))
        method = _read_array(fh).tobytes().decode()
        row_tree = _read_tree(fh)
        col_tree = row_tree if same else _read_tree(fh)
        far = [tuple(int(v) for v in p) for p in _read_array(fh)]
        close = [tuple(int(v) for v in p) for p in _read_array(fh)]
        bases = []
        for tree in (row_tree, col_tree):
            side = []
            for k in range(len(tree)):
                idx = _read_array(fh).astype(np.intp)
                side.append(Basis(k, idx, _read_array(fh)))
            bases.append(side)
        interaction = {key: _read_array(fh) for key in far}
        close_blocks = {key: _read_array(fh) for key in close}
    far_by_row = [[] for _ in range(len(row_tree))]
    far_by_col = [[] for _ in range(len(col_tree))]
    for t, s in far:
        far_by_row[t].append(s)
        far_by_col[s].append(t)
    partition = BlockPartition(far, close, far_by_row, far_by_col, eta)
    h2 = H2Matrix(row_tree, col_tree, partition, bases[0], bases[1], interaction, close_blocks)
    h2.stats = BuildStats(0.0, entries, iterations, method, tau)
    if h2.shape != (n, m):
        raise ValueError(f"{path}: shape mismatch")
    return h2
