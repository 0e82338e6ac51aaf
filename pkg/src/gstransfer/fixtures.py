"""Deterministic meshes and equilibria used by the tests and the acceptance suite."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial import Delaunay

from .equilibria import manufactured_vacuum, solve_linear_gs
from .mesh import Mesh2D, build_structured_mesh, longest_edge_first

DOMAIN = (1.0, 2.0, 0.0, 1.0)
SIZES = (8, 32, 128)
PLASMA_TAG, WALL_TAG = 1, 2
#: linear Grad-Shafranov source and vacuum field used throughout
GS_C, GS_F0 = 1.0, 10.0
VACUUM = (1.0, 0.0, 0.0, 2.0)


@lru_cache(maxsize=None)
def structured(n):
    return build_structured_mesh(*DOMAIN, n, n)


@lru_cache(maxsize=None)
def unstructured(n=24, seed=7):
    """Jittered-grid Delaunay triangulation with a plasma/wall region split.

    Cells whose centroid lies inside the ellipse centred at (1.5, 0.5) with
    semi-axes (0.3, 0.35) are tagged plasma, the rest wall.
    """
    rng = np.random.default_rng(seed)
    rmin, rmax, zmin, zmax = DOMAIN
    r = np.linspace(rmin, rmax, n + 1)
    z = np.linspace(zmin, zmax, n + 1)
    R, Z = np.meshgrid(r, z)
    pts = np.column_stack([R.ravel(), Z.ravel()])
    h = (rmax - rmin) / n
    interior = ((pts[:, 0] > rmin) & (pts[:, 0] < rmax) & (pts[:, 1] > zmin) & (pts[:, 1] < zmax))
    pts[interior] += rng.uniform(-0.3 * h, 0.3 * h, size=(interior.sum(), 2))
    tri = Delaunay(pts)
    cells = tri.simplices
    c = pts[cells].mean(axis=1)
    inside = ((c[:, 0] - 1.5) / 0.3) ** 2 + ((c[:, 1] - 0.5) / 0.35) ** 2 <= 1.0
    region = np.where(inside, PLASMA_TAG, WALL_TAG)
    return longest_edge_first(Mesh2D(pts, cells, region, reorient=True))


@lru_cache(maxsize=None)
def linear_gs(n=32):
    return solve_linear_gs(structured(n), GS_C, GS_F0)


@lru_cache(maxsize=None)
def vacuum(n=8):
    return manufactured_vacuum(structured(n), *VACUUM)
