"""Problem generators: Coulomb N-body matrix, collocated double-layer matrix on a
triangulated surface, and separable exact-rank kernels.

Every oracle here also evaluates its kernel against arbitrary proxy points,
which the Chebyshev-grid baseline needs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .densecore import MatrixOracle
from .geometry import PointSet


class SingularEntryError(ValueError):
    """An off-diagonal entry between coincident points was requested."""


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleSystem:
    points: PointSet
    charges: np.ndarray | None = None

    @property
    def count(self) -> int:
        return self.points.count


@dataclass(frozen=True)
class SurfaceMesh:
    """Per-element centers, unit outward normals and areas."""

    centers: np.ndarray
    normals: np.ndarray
    areas: np.ndarray

    def __post_init__(self):
        centers = np.ascontiguousarray(self.centers, dtype=float).reshape(-1, 3)
        normals = np.ascontiguousarray(self.normals, dtype=float).reshape(-1, 3)
        areas = np.ascontiguousarray(self.areas, dtype=float).reshape(-1)
        if not (len(centers) == len(normals) == len(areas)):
            raise ValueError("centers, normals and areas differ in length")
        if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > 1e-8):
            raise ValueError("normals must have unit length")
        if np.any(areas <= 0):
            raise ValueError("areas must be positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "areas", areas)

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def points(self) -> PointSet:
        return PointSet(self.centers)


def random_particles(n: int, seed: int = 0) -> ParticleSystem:
    """``n`` particles i.i.d. uniform in the unit cube."""
    if n < 1:
        raise ValueError("need at least one particle")
    rng = np.random.default_rng(np.uint64(seed))
    return ParticleSystem(PointSet(rng.random((n, 3))))


def load_mesh(path) -> SurfaceMesh:
    """Read ``cx cy cz nx ny nz area`` lines; ``#`` starts a comment."""
    centers, normals, areas = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            n = np.array(vals[3:6])
            if abs(np.linalg.norm(n) - 1.0) > 1e-8:
                raise ValueError(f"{path}:{lineno}: normal is not a unit vector")
            if vals[6] <= 0:
                raise ValueError(f"{path}:{lineno}: area must be positive")
            centers.append(vals[:3])
            normals.append(vals[3:6])
            areas.append(vals[6])
    if not centers:
        raise ValueError(f"{path}: no elements")
    return SurfaceMesh(np.array(centers), np.array(normals), np.array(areas))


def save_mesh(mesh: SurfaceMesh, path):
    with open(path, "w") as fh:
        fh.write("# cx cy cz nx ny nz area\n")
        for c, n, a in zip(mesh.centers, mesh.normals, mesh.areas):
            fh.write(" ".join(repr(float(v)) for v in (*c, *n, a)) + "\n")


_ICO_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _icosahedron():
    p = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _subdivided(level: int):
    if level not in _ICO_CACHE:
        verts, faces = _icosahedron()
        verts = list(verts)
        for _ in range(level):
            midpoint = {}
            new_faces = []

            def mid(a, b):
                key = (min(a, b), max(a, b))
                if key not in midpoint:
                    m = verts[a] + verts[b]
                    verts.append(m / np.linalg.norm(m))
                    midpoint[key] = len(verts) - 1
                return midpoint[key]

            for a, b, c in faces:
                ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
                new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
            faces = np.array(new_faces)
        _ICO_CACHE[level] = (np.array(verts), np.asarray(faces))
    return _ICO_CACHE[level]


def sphere_mesh(level: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Flat-triangle sphere from an icosahedron subdivided ``level`` times (20 * 4**level elements)."""
    verts, faces = _subdivided(level)
    tri = verts[faces] * radius
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    centers = tri.mean(axis=1)
    normals = cross / norm[:, None]
    # orient outward
    flip = np.einsum("ij,ij->i", normals, centers) < 0
    normals[flip] *= -1
    return SurfaceMesh(centers + np.asarray(center, dtype=float), normals, 0.5 * norm)


def sphere_level_for(n: int) -> int:
    """Smallest subdivision level whose sphere has at least ``n`` elements."""
    level = 0
    while 20 * 4 ** level < n:
        level += 1
    return level


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True, fastmath=False)
def _coulomb_block(x, y, rows, cols, same):
    out = np.empty((rows.size, cols.size))
    bad = False
    for a in range(rows.size):
        xi = x[rows[a]]
        for b in range(cols.size):
            if same and rows[a] == cols[b]:
                out[a, b] = 0.0
                continue
            yj = y[cols[b]]
            d0 = xi[0] - yj[0]
            d1 = xi[1] - yj[1]
            d2 = xi[2] - yj[2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            if r2 == 0.0:
                bad = True
                out[a, b] = 0.0
            else:
                out[a, b] = 1.0 / math.sqrt(r2)
    return out, bad


@numba.njit(cache=True, fastmath=True)
def _coulomb_matmat(x, yt, v):
    """``A @ v`` for the Coulomb kernel; ``yt`` is the 3 x m source array, zero distance gives 0."""
    n = x.shape[0]
    m = yt.shape[1]
    k = v.shape[1]
    vt = np.ascontiguousarray(v.T)
    y0, y1, y2 = yt[0], yt[1], yt[2]
    w = np.empty(m)
    out = np.zeros((n, k))
    for i in range(n):
        x0 = x[i, 0]
        x1 = x[i, 1]
        x2 = x[i, 2]
        for j in range(m):
            d0 = x0 - y0[j]
            d1 = x1 - y1[j]
            d2 = x2 - y2[j]
            q = d0 * d0 + d1 * d1 + d2 * d2
            w[j] = 1.0 / math.sqrt(q) if q > 0.0 else 0.0
        for c in range(k):
            acc = 0.0
            vc = vt[c]
            for j in range(m):
                acc += w[j] * vc[j]
            out[i, c] = acc
    return out


@numba.njit(cache=True, fastmath=False)
def _dl_block(r, nrm, area, scale, diag, rows, cols):
    out = np.empty((rows.size, cols.size))
    bad = False
    for a in range(rows.size):
        i = rows[a]
        for b in range(cols.size):
            j = cols[b]
            if i == j:
                out[a, b] = diag[i]
                continue
            d0 = r[i, 0] - r[j, 0]
            d1 = r[i, 1] - r[j, 1]
            d2 = r[i, 2] - r[j, 2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            if r2 == 0.0:
                bad = True
                out[a, b] = 0.0
            else:
                dot = d0 * nrm[i, 0] + d1 * nrm[i, 1] + d2 * nrm[i, 2]
                out[a, b] = scale * dot * area[i] / (r2 * math.sqrt(r2))
    return out, bad


@numba.njit(cache=True, fastmath=True)
def _dl_offdiag_matmat(r, nrm, area, scale, v, transpose):
    """Off-diagonal double-layer product, ``A @ v`` or ``A.T @ v``."""
    n = r.shape[0]
    k = v.shape[1]
    vt = np.ascontiguousarray(v.T)
    rt = np.ascontiguousarray(r.T)
    # receiver weights n_i * S_i * scale, one row per axis
    gt = np.ascontiguousarray((nrm * (area * scale)[:, None]).T)
    r0, r1, r2 = rt[0], rt[1], rt[2]
    g0, g1, g2 = gt[0], gt[1], gt[2]
    w = np.empty(n)
    out = np.zeros((n, k))
    for a in range(n):
        p0 = r0[a]
        p1 = r1[a]
        p2 = r2[a]
        if transpose:
            # column a: receivers b, source a
            for b in range(n):
                d0 = r0[b] - p0
                d1 = r1[b] - p1
                d2 = r2[b] - p2
                q = d0 * d0 + d1 * d1 + d2 * d2
                t = d0 * g0[b] + d1 * g1[b] + d2 * g2[b]
                w[b] = t / (q * math.sqrt(q)) if q > 0.0 else 0.0
        else:
            h0 = g0[a]
            h1 = g1[a]
            h2 = g2[a]
            for b in range(n):
                d0 = p0 - r0[b]
                d1 = p1 - r1[b]
                d2 = p2 - r2[b]
                q = d0 * d0 + d1 * d1 + d2 * d2
                t = d0 * h0 + d1 * h1 + d2 * h2
                w[b] = t / (q * math.sqrt(q)) if q > 0.0 else 0.0
        for c in range(k):
            acc = 0.0
            vc = vt[c]
            for b in range(n):
                acc += w[b] * vc[b]
            out[a, c] = acc
    return out


def _as_matrix(v):
    v = np.asarray(v, dtype=float)
    return (v[:, None], True) if v.ndim == 1 else (np.ascontiguousarray(v), False)


def _pairwise(x, y):
    d = x[:, None, :] - y[None, :, :]
    return d, np.sqrt(np.einsum("abk,abk->ab", d, d))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


class CoulombOracle(MatrixOracle):
    """``A_ij = 1/|X_i - X_j|`` off the diagonal, 0 on it."""

    def __init__(self, points: PointSet):
        self.x = np.ascontiguousarray(points.coords, dtype=float)
        if self.x.shape[1] != 3:
            raise ValueError("Coulomb kernel needs 3-d points")
        self._xt = np.ascontiguousarray(self.x.T)
        n = self.x.shape[0]
        self.shape = (n, n)

    def _block(self, rows, cols):
        out, bad = _coulomb_block(self.x, self.x, rows, cols, True)
        if bad:
            raise SingularEntryError("singular entry: coincident particles")
        return out

    def matmat(self, v):
        v, flat = _as_matrix(v)
        out = _coulomb_matmat(self.x, self._xt, v)
        return out[:, 0] if flat else out

    rmatmat = matmat

    def evaluate(self, x, y) -> float:
        return 1.0 / float(np.linalg.norm(np.subtract(x, y)))

    def source_proxy_block(self, rows, pts):
        _, dist = _pairwise(self.x[rows], pts)
        return 1.0 / dist

    def receiver_proxy_block(self, pts, cols):
        _, dist = _pairwise(pts, self.x[cols])
        return 1.0 / dist


class DoubleLayerOracle(MatrixOracle):
    """Collocated double-layer matrix of the polarizable-continuum solvation model.

    Off the diagonal ``A_ij = (eps-1)/(4 pi (1+eps)) * ((r_i-r_j).n_i) S_i / |r_i-r_j|^3``;
    the diagonal closes every column sum to ``eps/(1+eps)``. Diagonal entries
    need a full column pass each, so all of them are computed together on
    first use and cached.
    """

    def __init__(self, mesh: SurfaceMesh, epsilon: float = 78.5):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.mesh = mesh
        self.epsilon = float(epsilon)
        self.scale = (epsilon - 1.0) / (4.0 * math.pi * (1.0 + epsilon))
        self.r = mesh.centers
        self.n = mesh.normals
        self.s = mesh.areas
        self.shape = (mesh.count, mesh.count)
        self._diag = None

    @property
    def diagonal(self) -> np.ndarray:
        if self._diag is None:
            if len(np.unique(self.r, axis=0)) != len(self.r):
                raise SingularEntryError("singular entry: coincident element centers")
            ones = np.ones((self.shape[0], 1))
            colsum = _dl_offdiag_matmat(self.r, self.n, self.s, self.scale, ones, True)[:, 0]
            self._diag = self.epsilon / (1.0 + self.epsilon) - colsum
        return self._diag

    def _block(self, rows, cols):
        diag = self.diagonal if np.intersect1d(rows, cols).size else np.zeros(0)
        out, bad = _dl_block(self.r, self.n, self.s, self.scale, diag, rows, cols)
        if bad:
            raise SingularEntryError("singular entry: coincident element centers")
        return out

    def matmat(self, v):
        v, flat = _as_matrix(v)
        out = _dl_offdiag_matmat(self.r, self.n, self.s, self.scale, v, False)
        out += self.diagonal[:, None] * v
        return out[:, 0] if flat else out

    def rmatmat(self, v):
        v, flat = _as_matrix(v)
        out = _dl_offdiag_matmat(self.r, self.n, self.s, self.scale, v, True)
        out += self.diagonal[:, None] * v
        return out[:, 0] if flat else out

    def evaluate(self, x, y, normal=(1.0, 0.0, 0.0), area=1.0) -> float:
        d = np.subtract(x, y)
        q = float(np.linalg.norm(d))
        return self.scale * float(d @ np.asarray(normal)) * area / q**3

    def source_proxy_block(self, rows, pts):
        # real receivers keep their own normal and area; S_i scales the row
        d, dist = _pairwise(self.r[rows], pts)
        dot = np.einsum("abk,ak->ab", d, self.n[rows])
        return self.scale * dot * self.s[rows, None] / dist**3

    def receiver_proxy_block(self, pts, cols):
        # a proxy receiver has no normal: one row per axis direction, unit area
        d, dist = _pairwise(pts, self.r[cols])
        block = self.scale * d / dist[:, :, None] ** 3
        return block.transpose(2, 0, 1).reshape(-1, len(cols))


def _monomial_exponents(rank: int, dim: int):
    out = []
    for degree in itertools.count():
        for e in itertools.product(range(degree + 1), repeat=dim):
            if sum(e) == degree:
                out.append(e)
                if len(out) == rank:
                    return np.array(out)


class SeparableOracle(MatrixOracle):
    """``A_ij = sum_k g_k(x_i) g_k(y_j)`` with ``g_k`` the first ``rank`` monomials.

    Every submatrix has rank at most ``rank``.
    """

    def __init__(self, points_rows: PointSet, points_cols: PointSet, rank: int):
        if rank < 1:
            raise ValueError("rank must be positive")
        self.x = points_rows.coords
        self.y = points_cols.coords
        self.rank = rank
        self.exponents = _monomial_exponents(rank, self.x.shape[1])
        self.g = self._features(self.x)
        self.h = self._features(self.y)
        self.shape = (self.x.shape[0], self.y.shape[0])

    def _features(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.prod(pts[:, None, :] ** self.exponents[None, :, :], axis=2)

    def _block(self, rows, cols):
        return self.g[rows] @ self.h[cols].T

    def matmat(self, v):
        return self.g @ (self.h.T @ v)

    def rmatmat(self, v):
        return self.h @ (self.g.T @ v)

    def evaluate(self, x, y) -> float:
        return float(self._features(np.atleast_2d(x)) @ self._features(np.atleast_2d(y)).T)

    def source_proxy_block(self, rows, pts):
        return self.g[rows] @ self._features(pts).T

    def receiver_proxy_block(self, pts, cols):
        return self._features(pts) @ self.h[cols].T


def coulomb_oracle(system: ParticleSystem) -> CoulombOracle:
    return CoulombOracle(system.points)


def double_layer_oracle(mesh: SurfaceMesh, epsilon: float = 78.5) -> DoubleLayerOracle:
    return DoubleLayerOracle(mesh, epsilon)


def separable_oracle(points_rows, points_cols, rank: int) -> SeparableOracle:
    if not isinstance(points_rows, PointSet):
        points_rows = PointSet(points_rows)
    if not isinstance(points_cols, PointSet):
        points_cols = PointSet(points_cols)
    return SeparableOracle(points_rows, points_cols, rank)
