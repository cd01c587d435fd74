"""Geodesic icosphere meshes and least-squares angular differentiation on them."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


def icosphere_count(level: int) -> int:
    return 10 * 4**level + 2


def snap_count(n_omega: int) -> tuple[int, int]:
    """Nearest icosphere vertex count and its subdivision level; warns when snapping."""
    levels = np.arange(0, 8)
    counts = np.array([icosphere_count(k) for k in levels])
    k = int(levels[np.argmin(np.abs(np.log(counts) - np.log(max(n_omega, 1))))])
    if counts[k] != n_omega:
        warnings.warn(f"n_omega={n_omega} is not an icosphere count; using {counts[k]}", stacklevel=2)
    return int(counts[k]), k


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    p = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
         [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
         [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]],
        dtype=float,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]],
        dtype=np.int64,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _subdivide(v: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    verts = list(v)
    cache: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            m = verts[a] + verts[b]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    faces = []
    for a, b, c in f:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(verts), np.array(faces, dtype=np.int64)


@dataclass(frozen=True)
class Icosphere:
    """Unit-sphere vertices, outward-oriented triangles and angular derivative weights.

    ``nbr`` lists each vertex's two-ring neighbours (padded with the vertex
    itself) and ``grad_w`` the matching least-squares weights that turn
    neighbour differences into derivatives along the local tangent basis
    ``tangent``.
    """

    level: int
    vertices: np.ndarray
    faces: np.ndarray
    tangent: np.ndarray
    nbr: np.ndarray
    grad_w: np.ndarray

    @property
    def count(self) -> int:
        return len(self.vertices)

    def angular_gradient(self, values: np.ndarray) -> np.ndarray:
        """d/d(beta_1, beta_2) of per-vertex data (W, ...) -> (W, 2, ...)."""
        diff = values[self.nbr] - values[:, None]
        return np.einsum("wam,wm...->wa...", self.grad_w, diff)


def _tangent_basis(v: np.ndarray) -> np.ndarray:
    trial = np.where(np.abs(v[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    b1 = np.cross(trial, v)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(v, b1)
    return np.stack([b1, b2], axis=1)


def _rings(count: int, faces: np.ndarray) -> list[set[int]]:
    one = [set() for _ in range(count)]
    for a, b, c in faces:
        one[a] |= {b, c}
        one[b] |= {a, c}
        one[c] |= {a, b}
    two = []
    for i in range(count):
        s = set(one[i])
        for j in one[i]:
            s |= one[j]
        s.discard(i)
        two.append(s)
    return two


@lru_cache(maxsize=8)
def icosphere(level: int) -> Icosphere:
    """Icosphere with ``10 * 4**level + 2`` vertices.

    Angular derivative weights come from a cubic least-squares fit in the
    tangent-plane coordinates of the two-ring neighbourhood, so that the
    gradient is exact for cubic polynomials of the local coordinates.
    """
    v, f = _icosahedron()
    for _ in range(level):
        v, f = _subdivide(v, f)
    # orient every face outward
    cen = v[f].mean(axis=1)
    nrm = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    flip = np.einsum("fi,fi->f", nrm, cen) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    tan = _tangent_basis(v)
    rings = _rings(len(v), f)
    width = max(len(r) for r in rings)
    nbr = np.empty((len(v), width), dtype=np.int64)
    wts = np.zeros((len(v), 2, width))
    for i, ring in enumerate(rings):
        idx = np.array(sorted(ring))
        d = v[idx] - v[i]
        b = d @ tan[i].T
        scale = np.sqrt(np.mean(np.sum(b**2, axis=1)))
        q = b / scale
        cols = [q[:, 0], q[:, 1], q[:, 0] ** 2, q[:, 0] * q[:, 1], q[:, 1] ** 2,
                q[:, 0] ** 3, q[:, 0] ** 2 * q[:, 1], q[:, 0] * q[:, 1] ** 2, q[:, 1] ** 3,
                q[:, 0] ** 4, q[:, 0] ** 3 * q[:, 1], q[:, 0] ** 2 * q[:, 1] ** 2, q[:, 0] * q[:, 1] ** 3, q[:, 1] ** 4]
        design = np.stack(cols, axis=1)
        pinv = np.linalg.pinv(design)
        nbr[i, : len(idx)] = idx
        nbr[i, len(idx):] = i
        wts[i, :, : len(idx)] = pinv[:2] / scale
    return Icosphere(level, v, f, tan, nbr, wts)
