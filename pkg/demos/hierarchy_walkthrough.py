"""Build the toy sphere hierarchy and inspect its sampling operators.

Run: python3 demos/hierarchy_walkthrough.py
"""

import logging

import numpy as np

from meshgcn.mesh import spmm
from meshgcn.presets import toy_hierarchy
from meshgcn.shapes import grid_patch
from meshgcn.sampling import boundary_edges, decimate

logging.basicConfig(level=logging.ERROR)

h = toy_hierarchy()
for i, level in enumerate(h.levels):
    print(f"level {i}: {level.n_vertices} vertices, {level.mesh.faces.shape[0]} faces, "
          f"lambda_max {level.lambda_max:.4f}")

# Down-sampling selects kept vertices, up-sampling interpolates barycentrically.
for i, pair in enumerate(h.pairs):
    fine = h.levels[i].mesh.vertices
    coarse = spmm(pair.down, fine)
    back = spmm(pair.up, coarse)
    err = np.linalg.norm(back - fine, axis=1)
    rows = np.asarray(pair.up.sum(axis=1)).ravel()
    print(f"pair {i}: D {pair.down.shape}, U {pair.up.shape}, "
          f"U rows sum to 1: {np.allclose(rows, 1)}, "
          f"mean round-trip drift {err.mean():.4f}")

# Boundary vertices of a flat patch survive until interior ones are gone.
patch = grid_patch(8, 8)
coarse, kept = decimate(patch, 40)
boundary = set(np.unique(boundary_edges(patch)).tolist())
print(f"grid {patch.n_vertices} -> {coarse.n_vertices} vertices, boundary kept: "
      f"{len(boundary & set(kept.tolist()))}/{len(boundary)}")
