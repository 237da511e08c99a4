"""Triangle meshes, sparse graph operators and mesh file IO.

Sparse matrices are plain ``scipy.sparse.csr_matrix`` objects in 64-bit
floats. Triplet construction sums duplicate ``(row, col)`` entries, which the
Laplacian and quadric accumulation code relies on.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import TextIO

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


class MeshParseError(ValueError):
    """Malformed record in a mesh or matrix text file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshValidationError(ValueError):
    """Mesh violates a structural invariant (index range, degenerate face)."""


@dataclass(frozen=True)
class Mesh:
    """Vertex table plus triangle index table.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
        Vertex coordinates.
    faces : array_like, shape (M, 3)
        0-based vertex indices, counter-clockwise winding.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> None:
        f = self.faces
        if f.size == 0:
            return
        if self.n_vertices < 3:
            raise MeshValidationError("a mesh with faces needs at least 3 vertices")
        if f.min() < 0 or f.max() >= self.n_vertices:
            bad = int(np.flatnonzero((f < 0).any(1) | (f >= self.n_vertices).any(1))[0])
            raise MeshValidationError(
                f"face {bad} references a vertex outside [0, {self.n_vertices})"
            )
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            bad = int(np.flatnonzero(degenerate)[0])
            raise MeshValidationError(f"face {bad} repeats a vertex index")

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``i < j``, sorted."""
        if self.n_faces == 0:
            return np.zeros((0, 2), dtype=np.int64)
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


# ---------------------------------------------------------------------------
# sparse helpers


def sparse_from_triplets(rows, cols, values, shape) -> sparse.csr_matrix:
    """Build a CSR matrix from triplets, summing duplicates."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    n_rows, n_cols = shape
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
        raise ValueError(f"triplet index outside a {n_rows}x{n_cols} matrix")
    m = sparse.coo_matrix(
        (np.asarray(values, dtype=np.float64), (rows, cols)), shape=shape
    ).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def spmm(A: sparse.spmatrix, X: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``A @ X`` with a shape check."""
    X = np.asarray(X, dtype=np.float64)
    if A.shape[1] != X.shape[0]:
        raise ValueError(f"cannot multiply {A.shape} sparse matrix by {X.shape} features")
    return np.asarray(A @ X)


def adjacency(mesh: Mesh) -> sparse.csr_matrix:
    """Symmetric binary vertex adjacency from mesh edges (1-ring)."""
    n = mesh.n_vertices
    e = mesh.edges()
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse_from_triplets(rows, cols, np.ones(rows.size), (n, n))


def degrees(W: sparse.spmatrix) -> np.ndarray:
    return np.asarray(W.sum(axis=1)).ravel()


def normalized_laplacian(W: sparse.spmatrix) -> sparse.csr_matrix:
    """``I - D^-1/2 W D^-1/2``; isolated vertices get an identity row."""
    d = degrees(W)
    inv_sqrt = np.zeros_like(d)
    nz = d > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(d[nz])
    Dm = sparse.diags(inv_sqrt)
    L = sparse.identity(W.shape[0], format="csr") - Dm @ W @ Dm
    L = sparse.csr_matrix(L)
    L.sort_indices()
    return L


def unnormalized_laplacian(W: sparse.spmatrix) -> sparse.csr_matrix:
    """``D - W``, accumulated in integers so row sums are exactly zero."""
    Wi = sparse.csr_matrix(W).astype(np.int64)
    d = np.asarray(Wi.sum(axis=1)).ravel()
    L = (sparse.diags(d, dtype=np.int64) - Wi).tocsr().astype(np.float64)
    L.sort_indices()
    return L


def scaled_laplacian(L: sparse.spmatrix, lambda_max: float) -> sparse.csr_matrix:
    """Map the spectrum into [-1, 1]: ``2 L / lambda_max - I``."""
    if not lambda_max > 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    n = L.shape[0]
    out = sparse.csr_matrix((2.0 / lambda_max) * L - sparse.identity(n))
    out.sort_indices()
    return out


@dataclass(frozen=True)
class EigenEstimate:
    value: float
    converged: bool
    iterations: int


def max_eigenvalue(L: sparse.spmatrix, tol: float = 1e-6, max_iters: int = 1000,
                   seed: int = 0) -> EigenEstimate:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops once the eigen-residual ``||L v - lam v||`` drops below
    ``tol * lam``, which bounds the distance from ``lam`` to the spectrum.
    On exhaustion the last Rayleigh quotient is returned with
    ``converged=False``.
    """
    n = L.shape[0]
    if n == 0:
        raise ValueError("empty matrix")
    rng = np.random.default_rng(seed)
    v = 1.0 + 0.1 * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iters + 1):
        w = L @ v
        lam = float(v @ w)
        if lam <= 0.0:
            # v landed in the null space; restart from a fresh direction
            v = rng.standard_normal(n)
            v /= np.linalg.norm(v)
            continue
        resid = np.linalg.norm(w - lam * v)
        if resid <= tol * lam:
            return EigenEstimate(lam, True, it)
        v = w / np.linalg.norm(w)
    return EigenEstimate(lam, False, max_iters)


# ---------------------------------------------------------------------------
# OBJ


def load_mesh(source: TextIO | str) -> Mesh:
    """Read ``v`` and ``f`` records from an OBJ stream.

    Polygons are fan-triangulated from their first vertex. Other record types
    are ignored. Texture/normal suffixes (``f 1/1/1 ...``) are dropped.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise MeshParseError("vertex record needs 3 coordinates", lineno)
            try:
                verts.append((float(tok[1]), float(tok[2]), float(tok[3])))
            except ValueError:
                raise MeshParseError(f"bad vertex coordinate in {line!r}", lineno) from None
        elif tok[0] == "f":
            if len(tok) < 4:
                raise MeshParseError("face record needs at least 3 indices", lineno)
            idx = []
            for t in tok[1:]:
                try:
                    k = int(t.split("/", 1)[0])
                except ValueError:
                    raise MeshParseError(f"bad face index {t!r}", lineno) from None
                if k <= 0:
                    raise MeshParseError(f"face index {k} must be a positive 1-based index", lineno)
                idx.append(k - 1)
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_mesh(mesh: Mesh, sink: TextIO) -> None:
    for x, y, z in mesh.vertices:
        sink.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
    for a, b, c in mesh.faces:
        sink.write(f"f {a + 1} {b + 1} {c + 1}\n")


def read_obj(path) -> Mesh:
    with open(path) as fh:
        return load_mesh(fh)


def write_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        save_mesh(mesh, fh)


# ---------------------------------------------------------------------------
# sparse text format: "rows cols nnz" header, then "row col value" per line


def save_sparse(A: sparse.spmatrix, sink: TextIO) -> None:
    A = sparse.csr_matrix(A)
    A.sort_indices()
    coo = A.tocoo()
    sink.write(f"{A.shape[0]} {A.shape[1]} {coo.nnz}\n")
    for r, c, v in zip(coo.row, coo.col, coo.data):
        sink.write(f"{r} {c} {v:.17g}\n")


def load_sparse(source: TextIO | str) -> sparse.csr_matrix:
    if isinstance(source, str):
        source = io.StringIO(source)
    lines = iter(enumerate(source, start=1))
    header = None
    for lineno, raw in lines:
        if raw.strip():
            header = (lineno, raw.split())
            break
    if header is None:
        raise MeshParseError("missing header")
    lineno, tok = header
    try:
        n_rows, n_cols, nnz = (int(t) for t in tok)
    except ValueError:
        raise MeshParseError("header must be 'rows cols nnz'", lineno) from None
    rows, cols, vals = [], [], []
    for lineno, raw in lines:
        if not raw.strip():
            continue
        tok = raw.split()
        if len(tok) != 3:
            raise MeshParseError("expected 'row col value'", lineno)
        try:
            rows.append(int(tok[0]))
            cols.append(int(tok[1]))
            vals.append(float(tok[2]))
        except ValueError:
            raise MeshParseError(f"bad triplet {raw.strip()!r}", lineno) from None
    if len(vals) != nnz:
        raise MeshParseError(f"header declares {nnz} entries, found {len(vals)}")
    return sparse_from_triplets(rows, cols, vals, (n_rows, n_cols))


def read_sparse(path) -> sparse.csr_matrix:
    with open(path) as fh:
        return load_sparse(fh)


def write_sparse(A: sparse.spmatrix, path) -> None:
    with open(path, "w") as fh:
        save_sparse(A, fh)
