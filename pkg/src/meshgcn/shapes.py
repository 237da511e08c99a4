"""Procedural meshes used by the demos, the toy trainer and the tests."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .mesh import Mesh


def octahedron() -> Mesh:
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                  [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return Mesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron with ``10 * 4**s + 2`` vertices."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return Mesh(radius * np.array(verts), np.array(faces))


def grid_patch(nx: int = 10, ny: int = 10, size: float = 1.0, z=None) -> Mesh:
    """Flat ``nx`` by ``ny`` vertex grid in the z=0 plane, split into triangles.

    ``z`` may be a callable ``z(x, y)`` to lift the patch into a height field.
    """
    xs = np.linspace(0.0, size, nx)
    ys = np.linspace(0.0, size * (ny - 1) / max(nx - 1, 1), ny)
    X, Y = np.meshgrid(xs, ys)
    Z = np.zeros_like(X) if z is None else z(X, Y)
    v = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            faces += [[a, b, d], [a, d, c]]
    return Mesh(v, np.array(faces))


def random_patch(n_points: int, rng: np.random.Generator, bumpiness: float = 0.2) -> Mesh:
    """Delaunay triangulation of random planar points, lifted by a random height field."""
    while True:
        p = rng.uniform(0.0, 1.0, size=(n_points, 2))
        tri = Delaunay(p)
        f = tri.simplices
        # drop slivers so every face has a usable normal
        a, b, c = p[f[:, 0]], p[f[:, 1]], p[f[:, 2]]
        area = 0.5 * np.abs((b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0])
        f = f[area > 1e-6]
        used = np.unique(f)
        if used.size == n_points and f.shape[0] > 0:
            break
    cross = (p[f[:, 1]] - p[f[:, 0]])[:, 0] * (p[f[:, 2]] - p[f[:, 0]])[:, 1] - \
            (p[f[:, 1]] - p[f[:, 0]])[:, 1] * (p[f[:, 2]] - p[f[:, 0]])[:, 0]
    f = np.where((cross < 0)[:, None], f[:, [0, 2, 1]], f)
    k = rng.normal(size=(3, 2)) * 2.0
    phase = rng.uniform(0, 2 * np.pi, size=3)
    z = bumpiness * sum(np.sin(p @ k[i] + phase[i]) for i in range(3)) / 3.0
    return Mesh(np.column_stack([p, z]), f)
