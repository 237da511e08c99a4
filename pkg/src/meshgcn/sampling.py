"""Quadric-error mesh decimation and the down/up sampling hierarchy.

Decimation is a half-edge collapse: the removed vertex merges into one
endpoint of the edge, so every coarse vertex is an original fine vertex. That
keeps the down-sampling operator a 0/1 selection matrix. Removed vertices are
restored by barycentric interpolation on the nearest coarse triangle.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .mesh import (
    Mesh,
    MeshParseError,
    adjacency,
    max_eigenvalue,
    normalized_laplacian,
    read_obj,
    read_sparse,
    scaled_laplacian,
    sparse_from_triplets,
    unnormalized_laplacian,
    write_obj,
    write_sparse,
)

logger = logging.getLogger(__name__)

DEFAULT_BOUNDARY_WEIGHT = 1000.0


def boundary_edges(mesh: Mesh) -> np.ndarray:
    """Edges used by exactly one face, as a sorted (E, 2) array with i < j."""
    if mesh.n_faces == 0:
        return np.zeros((0, 2), dtype=np.int64)
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts == 1]


def _plane_quadric(normal: np.ndarray, point: np.ndarray) -> np.ndarray:
    p = np.append(normal, -normal @ point)
    return np.outer(p, p)


def vertex_quadrics(mesh: Mesh, boundary_weight: float = DEFAULT_BOUNDARY_WEIGHT) -> np.ndarray:
    """Per-vertex 4x4 error quadrics, shape (N, 4, 4).

    Each vertex sums the plane quadrics of its incident faces. For every
    boundary edge, the plane containing the edge and perpendicular to its
    face is added to both endpoints with weight ``boundary_weight``.
    """
    if boundary_weight < 0:
        raise ValueError("boundary_weight must be non-negative")
    v, f = mesh.vertices, mesh.faces
    Q = np.zeros((mesh.n_vertices, 4, 4))
    if mesh.n_faces == 0:
        return Q
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 0
    skipped = int((~ok).sum())
    if skipped:
        logger.warning("skipped %d zero-area faces while building quadrics", skipped)
    unit = np.zeros_like(n)
    unit[ok] = n[ok] / norm[ok, None]
    planes = np.column_stack([unit, -np.einsum("ij,ij->i", unit, v[f[:, 0]])])
    K = planes[:, :, None] * planes[:, None, :]
    K[~ok] = 0.0
    for corner in range(3):
        np.add.at(Q, f[:, corner], K)

    if boundary_weight > 0:
        be = {tuple(e) for e in boundary_edges(mesh)}
        for fi, face in enumerate(f):
            if not ok[fi]:
                continue
            for a, b in ((face[0], face[1]), (face[1], face[2]), (face[2], face[0])):
                key = (a, b) if a < b else (b, a)
                if key not in be:
                    continue
                m = np.cross(v[b] - v[a], unit[fi])
                mn = np.linalg.norm(m)
                if mn == 0:
                    continue
                Kb = boundary_weight * _plane_quadric(m / mn, v[a])
                Q[a] += Kb
                Q[b] += Kb
    return Q


def quadric_error(Q: np.ndarray, point) -> float:
    h = np.append(np.asarray(point, dtype=np.float64), 1.0)
    return float(h @ Q @ h)


class _Collapser:
    """Mutable state for greedy half-edge collapse."""

    def __init__(self, mesh: Mesh, boundary_weight: float):
        self.pos = mesh.vertices
        self.faces = mesh.faces.copy()
        self.face_alive = np.ones(mesh.n_faces, dtype=bool)
        self.vert_faces: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
        for fi, face in enumerate(self.faces):
            for x in face:
                self.vert_faces[x].add(fi)
        self.alive = np.ones(mesh.n_vertices, dtype=bool)
        self.Q = vertex_quadrics(mesh, boundary_weight)
        self.rank_boundary = boundary_weight > 0
        self.on_boundary = np.zeros(mesh.n_vertices, dtype=bool)
        self.on_boundary[boundary_edges(mesh).ravel()] = True
        self.edge_version: dict[tuple[int, int], int] = {}
        self.heap: list = []

    # -- topology queries ------------------------------------------------

    def neighbors(self, x: int) -> set[int]:
        out = set()
        for fi in self.vert_faces[x]:
            out.update(int(y) for y in self.faces[fi])
        out.discard(x)
        return out

    def edge_faces(self, a: int, b: int) -> list[int]:
        return sorted(self.vert_faces[a] & self.vert_faces[b])

    def is_boundary_vertex(self, x: int) -> bool:
        for y in self.neighbors(x):
            if len(self.vert_faces[x] & self.vert_faces[y]) == 1:
                return True
        return False

    def face_normal(self, face) -> np.ndarray:
        p = self.pos
        return np.cross(p[face[1]] - p[face[0]], p[face[2]] - p[face[0]])

    # -- priority queue --------------------------------------------------

    def push(self, a: int, b: int) -> None:
        if a > b:
            a, b = b, a
        Qs = self.Q[a] + self.Q[b]
        cost_keep_a = max(quadric_error(Qs, self.pos[a]), 0.0)
        cost_keep_b = max(quadric_error(Qs, self.pos[b]), 0.0)
        if cost_keep_b < cost_keep_a:
            remove, keep, cost = a, b, cost_keep_b
        else:
            remove, keep, cost = b, a, cost_keep_a
        rank = int(self.rank_boundary and self.on_boundary[remove])
        ver = self.edge_version.get((a, b), 0) + 1
        self.edge_version[(a, b)] = ver
        heapq.heappush(self.heap, (cost, rank, a, b, ver, remove, keep))

    # -- collapse --------------------------------------------------------

    def legal(self, u: int, v: int) -> bool:
        """Can ``u`` be merged into ``v`` without breaking the mesh?"""
        shared = self.edge_faces(u, v)
        if not shared:
            return False
        # link condition: common neighbours are exactly the edge's opposite vertices
        opposite = set()
        for fi in shared:
            opposite.update(int(y) for y in self.faces[fi])
        opposite -= {u, v}
        if self.neighbors(u) & self.neighbors(v) != opposite:
            return False
        # two boundary vertices joined through the interior would pinch the surface
        if len(shared) > 1 and self.is_boundary_vertex(u) and self.is_boundary_vertex(v):
            return False
        remaining = [fi for fi in self.vert_faces[u] if fi not in shared]
        if len(self.vert_faces[u] | self.vert_faces[v]) - len(shared) == 0:
            return False
        v_sets = {frozenset(int(y) for y in self.faces[fi]) for fi in self.vert_faces[v]}
        for fi in remaining:
            face = self.faces[fi]
            new = np.where(face == u, v, face)
            if frozenset(int(y) for y in new) in v_sets:
                return False
            before = self.face_normal(face)
            after = self.face_normal(new)
            if before @ after <= 0.0:
                return False
        return True

    def collapse(self, u: int, v: int) -> None:
        for fi in self.edge_faces(u, v):
            self.face_alive[fi] = False
            for x in self.faces[fi]:
                self.vert_faces[x].discard(fi)
        for fi in list(self.vert_faces[u]):
            face = self.faces[fi]
            face[face == u] = v
            self.vert_faces[v].add(fi)
        self.vert_faces[u].clear()
        self.alive[u] = False
        self.Q[v] += self.Q[u]
        self.on_boundary[v] |= self.on_boundary[u]
        ring = self.neighbors(v)
        touched = set()
        for x in ring | {v}:
            for y in self.neighbors(x):
                touched.add((min(x, y), max(x, y)))
        for a, b in sorted(touched):
            self.push(a, b)

    def run(self, target: int) -> int:
        for a, b in Mesh(self.pos, self.faces).edges():
            self.push(int(a), int(b))
        count = int(self.alive.sum())
        while count > target and self.heap:
            cost, rank, a, b, ver, remove, keep = heapq.heappop(self.heap)
            if self.edge_version.get((a, b)) != ver:
                continue
            if not (self.alive[a] and self.alive[b]):
                continue
            if not self.legal(remove, keep):
                continue
            self.collapse(remove, keep)
            count -= 1
        return count

    def result(self) -> tuple[Mesh, np.ndarray]:
        kept = np.flatnonzero(self.alive)
        remap = -np.ones(self.alive.size, dtype=np.int64)
        remap[kept] = np.arange(kept.size)
        faces = remap[self.faces[self.face_alive]]
        return Mesh(self.pos[kept], faces), kept


def decimate(mesh: Mesh, target_vertices: int,
             boundary_weight: float = DEFAULT_BOUNDARY_WEIGHT) -> tuple[Mesh, np.ndarray]:
    """Greedy quadric-error edge collapse down to ``target_vertices``.

    Returns the coarse mesh and ``kept``, the fine index of every coarse
    vertex (ascending). If no legal collapse remains before the target is
    reached, decimation stops early and the coarse mesh is simply larger.
    """
    n = mesh.n_vertices
    if target_vertices >= n:
        if target_vertices == n:
            return mesh, np.arange(n)
        raise ValueError(f"target {target_vertices} must be below the vertex count {n}")
    if target_vertices < 3:
        raise ValueError("target_vertices must be at least 3")
    c = _Collapser(mesh, boundary_weight)
    achieved = c.run(target_vertices)
    if achieved > target_vertices:
        logger.warning("decimation stopped at %d vertices (target %d)", achieved, target_vertices)
    return c.result()


# ---------------------------------------------------------------------------
# sampling matrices


def downsampling_matrix(kept: np.ndarray, n_fine: int) -> sparse.csr_matrix:
    kept = np.asarray(kept, dtype=np.int64)
    return sparse_from_triplets(np.arange(kept.size), kept, np.ones(kept.size),
                                (kept.size, n_fine))


def closest_point_barycentric(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point on each triangle ``(a[i], b[i], c[i])`` to the point ``p``.

    Returns squared distances and barycentric weights, shape (T,) and (T, 3).
    Region tests follow the Voronoi-region walk of Ericson's
    Real-Time Collision Detection, vectorized over triangles.
    """
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c
    dot = lambda x, y: np.einsum("ij,ij->i", x, y)
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    one, zero = np.ones_like(d1), np.zeros_like(d1)
    bary = np.stack([
        np.select(conds, [one, zero, 1 - t_ab, zero, 1 - t_ac, zero], 1 - v_in - w_in),
        np.select(conds, [zero, one, t_ab, zero, zero, 1 - t_bc], v_in),
        np.select(conds, [zero, zero, zero, one, t_ac, t_bc], w_in),
    ], axis=1)
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    d2sq = np.einsum("ij,ij->i", q - p, q - p)
    d2sq = np.where(np.isfinite(d2sq), d2sq, np.inf)
    return d2sq, bary


def upsampling_matrix(fine: Mesh, coarse: Mesh, kept) -> sparse.csr_matrix:
    """Fine-from-coarse interpolation matrix, shape (N_fine, N_coarse).

    Kept vertices copy their coarse counterpart. Every removed vertex is
    projected onto its nearest coarse triangle (lowest face index on ties)
    and stores that triangle's barycentric weights.
    """
    kept = np.asarray(kept, dtype=np.int64)
    if coarse.n_faces == 0:
        raise ValueError("coarse mesh has no faces; cannot project removed vertices")
    if kept.size != coarse.n_vertices or np.unique(kept).size != kept.size:
        raise ValueError("kept must map each coarse vertex to a distinct fine vertex")
    coarse_of = -np.ones(fine.n_vertices, dtype=np.int64)
    coarse_of[kept] = np.arange(kept.size)
    cv, cf = coarse.vertices, coarse.faces
    A, B, C = cv[cf[:, 0]], cv[cf[:, 1]], cv[cf[:, 2]]
    rows, cols, vals = [], [], []
    for i in range(fine.n_vertices):
        if coarse_of[i] >= 0:
            rows.append(i)
            cols.append(coarse_of[i])
            vals.append(1.0)
            continue
        d2, bary = closest_point_barycentric(fine.vertices[i], A, B, C)
        t = int(np.argmin(d2))
        w = bary[t]
        for corner in range(3):
            if w[corner] != 0.0:
                rows.append(i)
                cols.append(cf[t, corner])
                vals.append(w[corner])
    return sparse_from_triplets(rows, cols, vals, (fine.n_vertices, coarse.n_vertices))


@dataclass(frozen=True)
class SamplingPair:
    down: sparse.csr_matrix
    up: sparse.csr_matrix
    kept: np.ndarray


@dataclass
class Level:
    mesh: Mesh
    laplacian: sparse.csr_matrix
    scaled: sparse.csr_matrix
    lambda_max: float
    lambda_converged: bool = True
    _smooth: sparse.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def smooth_laplacian(self) -> sparse.csr_matrix:
        """Unnormalized ``D - W`` for the smoothness penalty."""
        if self._smooth is None:
            self._smooth = unnormalized_laplacian(adjacency(self.mesh))
        return self._smooth


@dataclass
class MeshHierarchy:
    """Meshes from finest (index 0) to coarsest, with sampling pairs.

    ``pairs[k]`` maps between ``levels[k]`` (fine) and ``levels[k + 1]``.
    """

    levels: list[Level]
    pairs: list[SamplingPair]
    boundary_weight: float = DEFAULT_BOUNDARY_WEIGHT
    lambda_strategy: str = "power"

    def __post_init__(self):
        if len(self.pairs) != len(self.levels) - 1:
            raise ValueError("need exactly one sampling pair between consecutive levels")
        counts = self.vertex_counts
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"vertex counts must strictly decrease, got {counts}")

    @property
    def vertex_counts(self) -> list[int]:
        return [lv.n_vertices for lv in self.levels]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.vertex_counts, dtype="<i8").tobytes())
        for pair in self.pairs:
            for m in (pair.down, pair.up):
                m = sparse.csr_matrix(m)
                m.sort_indices()
                h.update(np.asarray(m.shape, dtype="<i8").tobytes())
                h.update(m.indptr.astype("<i8").tobytes())
                h.update(m.indices.astype("<i8").tobytes())
                h.update(m.data.astype("<f8").tobytes())
        return h.hexdigest()


def parse_lambda_strategy(strategy: str) -> float | None:
    """``"power"`` -> None (estimate), ``"fixed:<value>"`` -> that value."""
    if strategy == "power":
        return None
    if strategy.startswith("fixed:"):
        try:
            value = float(strategy.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad lambda strategy {strategy!r}") from None
        if value <= 0:
            raise ValueError("fixed lambda_max must be positive")
        return value
    raise ValueError(f"unknown lambda strategy {strategy!r}; use 'power' or 'fixed:<value>'")


def make_level(mesh: Mesh, lambda_strategy: str = "power",
               lambda_max: float | None = None, converged: bool = True) -> Level:
    L = normalized_laplacian(adjacency(mesh))
    if lambda_max is None:
        lambda_max = parse_lambda_strategy(lambda_strategy)
        if lambda_max is None:
            est = max_eigenvalue(L, tol=1e-6, max_iters=1000)
            converged = est.converged
            lambda_max = est.value
            if not converged:
                logger.warning("power iteration did not converge on %d vertices; using lambda_max=2",
                               mesh.n_vertices)
                lambda_max = 2.0
    return Level(mesh, L, scaled_laplacian(L, lambda_max), float(lambda_max), converged)


def build_hierarchy(mesh: Mesh, targets, boundary_weight: float = DEFAULT_BOUNDARY_WEIGHT,
                    lambda_strategy: str = "power") -> MeshHierarchy:
    """Decimate ``mesh`` through each target count in turn."""
    targets = [int(t) for t in targets]
    if any(b >= a for a, b in zip(targets, targets[1:])):
        raise ValueError("targets must be strictly decreasing")
    if targets and targets[0] >= mesh.n_vertices:
        raise ValueError("every target must be below the input vertex count")
    parse_lambda_strategy(lambda_strategy)
    levels = [make_level(mesh, lambda_strategy)]
    pairs = []
    current = mesh
    for t in targets:
        coarse, kept = decimate(current, t, boundary_weight)
        if coarse.n_vertices >= current.n_vertices:
            raise ValueError(f"decimation made no progress towards {t} vertices")
        pairs.append(SamplingPair(
            down=downsampling_matrix(kept, current.n_vertices),
            up=upsampling_matrix(current, coarse, kept),
            kept=kept,
        ))
        levels.append(make_level(coarse, lambda_strategy))
        current = coarse
    return MeshHierarchy(levels, pairs, boundary_weight, lambda_strategy)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.txt, level_k.obj, kept_k.txt, down_k.txt, up_k.txt, laplacian_k.txt

MANIFEST = "manifest.txt"


def save_hierarchy(h: MeshHierarchy, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, lv in enumerate(h.levels):
        write_obj(lv.mesh, d / f"level_{k}.obj")
        write_sparse(lv.laplacian, d / f"laplacian_{k}.txt")
    for k, pair in enumerate(h.pairs):
        write_sparse(pair.down, d / f"down_{k}.txt")
        write_sparse(pair.up, d / f"up_{k}.txt")
        np.savetxt(d / f"kept_{k}.txt", pair.kept, fmt="%d")
    with open(d / MANIFEST, "w") as fh:
        fh.write("format meshgcn-hierarchy 1\n")
        fh.write(f"boundary_weight {h.boundary_weight:.17g}\n")
        fh.write(f"lambda_strategy {h.lambda_strategy}\n")
        fh.write(f"fingerprint {h.fingerprint()}\n")
        fh.write("# level vertices faces lambda_max converged\n")
        for k, lv in enumerate(h.levels):
            fh.write(f"level {k} {lv.n_vertices} {lv.mesh.n_faces} "
                     f"{lv.lambda_max:.17g} {int(lv.lambda_converged)}\n")
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    info: dict = {"levels": []}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            try:
                if tok[0] == "level":
                    info["levels"].append({
                        "vertices": int(tok[2]), "faces": int(tok[3]),
                        "lambda_max": float(tok[4]), "converged": bool(int(tok[5])),
                    })
                elif tok[0] == "boundary_weight":
                    info["boundary_weight"] = float(tok[1])
                elif tok[0] in ("lambda_strategy", "fingerprint"):
                    info[tok[0]] = tok[1]
                elif tok[0] == "format":
                    info["format"] = " ".join(tok[1:])
            except (IndexError, ValueError):
                raise MeshParseError(f"bad manifest record {line!r}", lineno) from None
    if not info["levels"]:
        raise MeshParseError("manifest lists no levels")
    return info


def load_hierarchy(directory) -> MeshHierarchy:
    d = Path(directory)
    info = read_manifest(d)
    levels = []
    for k, rec in enumerate(info["levels"]):
        mesh = read_obj(d / f"level_{k}.obj")
        if mesh.n_vertices != rec["vertices"]:
            raise MeshParseError(f"level {k}: manifest says {rec['vertices']} vertices, "
                                 f"mesh has {mesh.n_vertices}")
        levels.append(make_level(mesh, lambda_max=rec["lambda_max"], converged=rec["converged"]))
    pairs = []
    for k in range(len(levels) - 1):
        kept = np.atleast_1d(np.loadtxt(d / f"kept_{k}.txt", dtype=np.int64))
        pairs.append(SamplingPair(read_sparse(d / f"down_{k}.txt"),
                                  read_sparse(d / f"up_{k}.txt"), kept))
    h = MeshHierarchy(levels, pairs, info.get("boundary_weight", DEFAULT_BOUNDARY_WEIGHT),
                      info.get("lambda_strategy", "power"))
    expected = info.get("fingerprint")
    if expected is not None and expected != h.fingerprint():
        raise MeshParseError(f"hierarchy in {os.fspath(d)} does not match its manifest fingerprint")
    return h
