"""Oriented triangular meshes in the (r, z) poloidal plane.

Cells are stored counterclockwise with local vertex 0 as the *newest vertex*:
the edge opposite it, ``(v1, v2)``, is the refinement edge used by newest-vertex
bisection.  Edges carry a global orientation from the lower to the higher vertex
index, which fixes the sign convention of every edge-based degree of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

#: region tag given to cells when nothing else is specified
DEFAULT_REGION = 1
#: mark given to boundary edges when nothing else is specified
DEFAULT_BOUNDARY_MARK = 1

INSIDE_TOL = 1e-10


class MeshError(ValueError):
    """Invalid mesh geometry or topology."""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class Mesh2D:
    """Immutable triangular mesh with derived edge topology.

    Parameters
    ----------
    vertices : array_like, shape (nv, 2)
        Vertex coordinates ``(r, z)``; every ``r`` must be positive.
    cells : array_like, shape (nc, 3)
        Vertex indices per cell.  Clockwise cells are rejected unless
        ``reorient=True``.
    region : array_like, shape (nc,), optional
        Integer region tag per cell.
    boundary_marks : dict, optional
        Maps a vertex pair ``(a, b)`` (any order) to the integer mark of that
        boundary edge.  Unlisted boundary edges get ``DEFAULT_BOUNDARY_MARK``.
    reorient : bool
        Flip clockwise cells instead of rejecting them.
    """

    def __init__(self, vertices, cells, region=None, boundary_marks=None, reorient=False):
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        cells = np.array(cells, dtype=np.int64).reshape(-1, 3)
        if len(cells) == 0:
            raise MeshError("mesh has no cells")
        if cells.min() < 0 or cells.max() >= len(vertices):
            raise MeshError("cell references a missing vertex")
        if np.any(vertices[:, 0] <= 0.0):
            bad = int(np.argmin(vertices[:, 0]))
            raise MeshError(f"vertex {bad} has r <= 0; the domain must exclude the axis")
        area = _signed_area(vertices, cells)
        if reorient:
            flip = area < 0
            cells[flip] = cells[flip][:, [0, 2, 1]]
            area = np.abs(area)
        if np.any(area <= 0.0):
            bad = int(np.argmin(area))
            raise MeshError(f"cell {bad} has non-positive signed area {area[bad]:.3e}", cell=bad)

        if region is None:
            region = np.full(len(cells), DEFAULT_REGION, dtype=np.int64)
        region = np.array(region, dtype=np.int64).reshape(-1)
        if region.shape != (len(cells),):
            raise MeshError("region tags must have one entry per cell")

        for arr in (vertices, cells, region, area):
            arr.flags.writeable = False
        self.vertices = vertices
        self.cells = cells
        self.region = region
        self.area = area
        self._build_edges()
        self._build_boundary(boundary_marks or {})

    # -- topology -------------------------------------------------------------

    def _build_edges(self):
        c = self.cells
        # local edge i is opposite local vertex i and runs v[i+1] -> v[i+2]
        start = c[:, [1, 2, 0]]
        end = c[:, [2, 0, 1]]
        lo = np.minimum(start, end)
        hi = np.maximum(start, end)
        keys = np.stack([lo.ravel(), hi.ravel()], axis=1)
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.edges = edges
        self.cell_edges = inverse.reshape(-1, 3)
        self.cell_edge_signs = np.where(start < end, 1, -1).astype(np.int64)

        ne = len(edges)
        counts = np.bincount(inverse, minlength=ne)
        if counts.max() > 2:
            bad = int(np.argmax(counts))
            raise MeshError(f"edge {tuple(edges[bad])} is shared by {counts[bad]} cells")
        edge_cells = np.full((ne, 2), -1, dtype=np.int64)
        edge_local = np.full((ne, 2), -1, dtype=np.int64)
        cell_ids = np.repeat(np.arange(len(c)), 3)
        local_ids = np.tile(np.arange(3), len(c))
        order = np.argsort(inverse, kind="stable")
        sorted_edges = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_edges[1:] != sorted_edges[:-1]
        slot = np.where(first, 0, 1)
        edge_cells[sorted_edges, slot] = cell_ids[order]
        edge_local[sorted_edges, slot] = local_ids[order]
        self.edge_cells = edge_cells
        self.edge_local = edge_local
        for arr in (self.edges, self.cell_edges, self.cell_edge_signs, edge_cells, edge_local):
            arr.flags.writeable = False

    def _build_boundary(self, marks):
        bnd = np.flatnonzero(self.edge_cells[:, 1] < 0)
        self.boundary_edges = bnd
        self.boundary_cells = self.edge_cells[bnd, 0]
        self.boundary_local = self.edge_local[bnd, 0]
        c = self.cells[self.boundary_cells]
        loc = self.boundary_local
        a = c[np.arange(len(bnd)), (loc + 1) % 3]
        b = c[np.arange(len(bnd)), (loc + 2) % 3]
        t = self.vertices[b] - self.vertices[a]
        length = np.hypot(t[:, 0], t[:, 1])
        # a -> b runs counterclockwise around the owning cell; outward is to its right
        self.boundary_normals = np.stack([t[:, 1], -t[:, 0]], axis=1) / length[:, None]
        self.boundary_lengths = length
        lookup = {(min(int(p), int(q)), max(int(p), int(q))): m for (p, q), m in marks.items()}
        self.boundary_marks = np.array(
            [lookup.get(tuple(int(v) for v in self.edges[e]), DEFAULT_BOUNDARY_MARK) for e in bnd],
            dtype=np.int64,
        )
        for arr in (bnd, self.boundary_cells, self.boundary_local, self.boundary_normals,
                    self.boundary_lengths, self.boundary_marks):
            arr.flags.writeable = False

    # -- sizes and geometry -----------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    @cached_property
    def cell_coords(self):
        """Vertex coordinates per cell, shape (nc, 3, 2)."""
        return self.vertices[self.cells]

    @cached_property
    def centroids(self):
        return self.cell_coords.mean(axis=1)

    @cached_property
    def grad_lambda(self):
        """Gradients of the barycentric coordinates, shape (nc, 3, 2)."""
        x = self.cell_coords
        g = np.empty_like(x)
        for i in range(3):
            p = x[:, (i + 1) % 3]
            q = x[:, (i + 2) % 3]
            g[:, i, 0] = p[:, 1] - q[:, 1]
            g[:, i, 1] = q[:, 0] - p[:, 0]
        return g / (2.0 * self.area)[:, None, None]

    @cached_property
    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def boundary_vertex_mask(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    def to_physical(self, cells, bary):
        """Map barycentric coordinates in ``cells`` to physical points."""
        return np.einsum("nk,nkd->nd", bary, self.cell_coords[cells])

    @cached_property
    def locator(self):
        return PointLocator(self)

    def same_as(self, other):
        """True when ``other`` has identical vertices and cells."""
        if self is other:
            return True
        return (
            self.vertices.shape == other.vertices.shape
            and self.cells.shape == other.cells.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.cells, other.cells)
        )

    def __repr__(self):
        return f"Mesh2D(vertices={self.n_vertices}, cells={self.n_cells}, edges={self.n_edges})"


def _signed_area(vertices, cells):
    x = vertices[cells]
    d1 = x[:, 1] - x[:, 0]
    d2 = x[:, 2] - x[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def check_conformity(mesh):
    """Return a list of violated incidence invariants (empty when conforming)."""
    problems = []
    counts = (mesh.edge_cells >= 0).sum(axis=1)
    if np.any(counts < 1) or np.any(counts > 2):
        problems.append("edge shared by an invalid number of cells")
    # a hanging node shows up as a boundary vertex of degree != 2
    bverts = mesh.edges[mesh.boundary_edges].ravel()
    degree = np.bincount(bverts, minlength=mesh.n_vertices)[np.unique(bverts)]
    if np.any(degree != 2):
        problems.append("boundary edges do not form simple closed loops (hanging node?)")
    flux = (mesh.boundary_normals * mesh.boundary_lengths[:, None]).sum(axis=0)
    scale = mesh.boundary_lengths.sum()
    if np.abs(flux).max() > 1e-12 * max(scale, 1.0):
        problems.append("boundary normals do not close")
    if np.any(mesh.area <= 0):
        problems.append("non-positive cell area")
    return problems


# -- construction ----------------------------------------------------------------


def build_structured_mesh(rmin, rmax, zmin, zmax, nr, nz):
    """Rectangle split into ``nr * nz`` cells, each cut by its rising diagonal.

    Every rectangle ``(i, j)`` yields the triangles ``(p00, p10, p11)`` and
    ``(p00, p11, p01)``.  The diagonal is stored as the refinement edge so that
    newest-vertex bisection pairs neighbouring triangles.
    """
    if rmin <= 0:
        raise MeshError("rmin must be positive: the mesh may not touch the symmetry axis")
    if not rmax > rmin or not zmax > zmin:
        raise MeshError("degenerate mesh extents")
    nr, nz = int(nr), int(nz)
    if nr < 1 or nz < 1:
        raise MeshError("nr and nz must be at least 1")
    r = np.linspace(rmin, rmax, nr + 1)
    z = np.linspace(zmin, zmax, nz + 1)
    R, Z = np.meshgrid(r, z, indexing="xy")
    vertices = np.stack([R.ravel(), Z.ravel()], axis=1)

    def vid(i, j):
        return j * (nr + 1) + i

    i, j = np.meshgrid(np.arange(nr), np.arange(nz), indexing="xy")
    i, j = i.ravel(), j.ravel()
    p00, p10, p11, p01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    lower = np.stack([p10, p11, p00], axis=1)
    upper = np.stack([p01, p00, p11], axis=1)
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return Mesh2D(vertices, cells)


def perturb_mesh(mesh, alpha):
    """Move every vertex by ``alpha * sin`` of its own coordinates.

    Connectivity, region tags and boundary marks are kept.  Raises
    :class:`MeshError` (with ``.cell`` set) if a cell folds over.
    """
    v = mesh.vertices
    moved = v + alpha * np.sin(v)
    area = _signed_area(moved, mesh.cells)
    if np.any(area <= 0):
        bad = int(np.argmin(area))
        raise MeshError(f"perturbation inverts cell {bad}", cell=bad)
    return Mesh2D(moved, mesh.cells, mesh.region, _marks_of(mesh))


def _marks_of(mesh):
    return {tuple(int(x) for x in mesh.edges[e]): int(m)
            for e, m in zip(mesh.boundary_edges, mesh.boundary_marks)}


def longest_edge_first(mesh):
    """Rotate each cell so its longest edge becomes the refinement edge."""
    x = mesh.cell_coords
    lens = np.stack(
        [np.linalg.norm(x[:, (i + 2) % 3] - x[:, (i + 1) % 3], axis=1) for i in range(3)], axis=1
    )
    k = np.argmax(lens, axis=1)
    idx = (k[:, None] + np.arange(3)[None, :]) % 3
    cells = np.take_along_axis(mesh.cells, idx, axis=1)
    return Mesh2D(mesh.vertices, cells, mesh.region, _marks_of(mesh))


def refine_along_levelset(mesh, psi, iso, passes=1):
    """Bisect every cell whose vertex values of ``psi`` straddle ``iso``.

    Parameters
    ----------
    mesh : Mesh2D
    psi : array_like or Field
        Nodal (CG1) values on ``mesh``.
    iso : float
        Level to refine along.
    passes : int
        Number of flag-and-bisect rounds.

    Returns
    -------
    (Mesh2D, ndarray)
        The refined conforming mesh and ``psi`` linearly interpolated onto it.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    values = np.asarray(getattr(psi, "coeffs", psi), dtype=float)
    if values.shape != (mesh.n_vertices,):
        raise ValueError("psi must hold one value per mesh vertex")
    for _ in range(passes):
        vals = values[mesh.cells]
        flagged = (vals.min(axis=1) <= iso) & (vals.max(axis=1) >= iso)
        if not flagged.any():
            break
        mesh, values = bisect(mesh, flagged, values)
    return mesh, values


def bisect(mesh, flagged, nodal=None):
    """Newest-vertex bisection of the flagged cells plus conforming closure."""
    marked = np.zeros(mesh.n_edges, dtype=bool)
    marked[mesh.cell_edges[flagged, 0]] = True
    while True:
        touched = marked[mesh.cell_edges].any(axis=1)
        ref = mesh.cell_edges[touched, 0]
        if marked[ref].all():
            break
        marked[ref] = True

    marked_pairs = {tuple(int(v) for v in mesh.edges[e]) for e in np.flatnonzero(marked)}
    vertices = [tuple(p) for p in mesh.vertices.tolist()]
    values = None if nodal is None else list(np.asarray(nodal, dtype=float))
    midpoint = {}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        m = midpoint.get(key)
        if m is None:
            pa, pb = vertices[a], vertices[b]
            m = len(vertices)
            vertices.append((0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])))
            if values is not None:
                values.append(0.5 * (values[a] + values[b]))
            midpoint[key] = m
        return m

    def is_marked(a, b):
        return ((a, b) if a < b else (b, a)) in marked_pairs

    new_cells, new_region = [], []
    old_marks = _marks_of(mesh)
    marks = dict(old_marks)

    def split(cell, tag):
        v0, v1, v2 = cell
        if not is_marked(v1, v2):
            new_cells.append(cell)
            new_region.append(tag)
            return
        m = mid(v1, v2)
        key = (v1, v2) if v1 < v2 else (v2, v1)
        if key in old_marks:
            mark = old_marks[key]
            marks[(min(v1, m), max(v1, m))] = mark
            marks[(min(v2, m), max(v2, m))] = mark
        split((m, v0, v1), tag)
        split((m, v2, v0), tag)

    for cell, tag in zip(mesh.cells.tolist(), mesh.region.tolist()):
        split(tuple(cell), tag)

    refined = Mesh2D(np.array(vertices), np.array(new_cells), np.array(new_region), marks)
    if values is None:
        return refined, None
    return refined, np.array(values)


# -- point location ----------------------------------------------------------------


@dataclass(frozen=True)
class PointLocation:
    """Result of locating one point: owning cell, barycentrics and status."""

    cell: int
    bary: np.ndarray
    status: str  # "inside" | "on-boundary" | "outside"


class PointLocator:
    """Bucket grid over cell bounding boxes for vectorised point location.

    Points that fall in no cell are attributed to the nearest cell and given the
    barycentric coordinates of the closest point of that cell.
    """

    def __init__(self, mesh, cells_per_bucket=2.0):
        self.mesh = mesh
        x = mesh.cell_coords
        lo = x.min(axis=1)
        hi = x.max(axis=1)
        self.origin = mesh.vertices.min(axis=0)
        extent = mesh.vertices.max(axis=0) - self.origin
        nb = max(1, int(np.sqrt(mesh.n_cells / cells_per_bucket)))
        self.shape = (nb, nb)
        self.size = np.where(extent > 0, extent / nb, 1.0)
        ilo = self._bin(lo)
        ihi = self._bin(hi)
        buckets = [[] for _ in range(nb * nb)]
        for c in range(mesh.n_cells):
            for bi in range(ilo[c, 0], ihi[c, 0] + 1):
                for bj in range(ilo[c, 1], ihi[c, 1] + 1):
                    buckets[bi * nb + bj].append(c)
        width = max(len(b) for b in buckets)
        table = np.full((nb * nb, width), -1, dtype=np.int64)
        for k, b in enumerate(buckets):
            table[k, : len(b)] = b
        self.table = table
        from scipy.spatial import cKDTree

        self._centroid_tree = cKDTree(mesh.centroids)

    def _bin(self, pts):
        idx = np.floor((pts - self.origin) / self.size).astype(np.int64)
        return np.clip(idx, 0, np.array(self.shape) - 1)

    def locate(self, points):
        """Locate many points at once.

        Returns
        -------
        cells : (n,) int
        bary : (n, 3) float
        inside : (n,) bool
            False for points outside the mesh (nearest-cell fallback).
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        b = self._bin(pts)
        cand = self.table[b[:, 0] * self.shape[1] + b[:, 1]]
        valid = cand >= 0
        lam = _bary(self.mesh, np.where(valid, cand, 0), pts[:, None, :])
        score = np.where(valid, lam.min(axis=2), -np.inf)
        best = np.argmax(score, axis=1)
        rows = np.arange(len(pts))
        cells = cand[rows, best]
        bary = lam[rows, best]
        inside = score[rows, best] >= -INSIDE_TOL
        out = np.flatnonzero(~inside)
        if len(out):
            c_out, l_out = self._nearest(pts[out])
            cells[out] = c_out
            bary[out] = l_out
        return cells, bary, inside

    def _nearest(self, pts, k=8):
        k = min(k, self.mesh.n_cells)
        _, cand = self._centroid_tree.query(pts, k=k)
        cand = np.asarray(cand).reshape(len(pts), k)
        x = self.mesh.cell_coords[cand]  # (n, k, 3, 2)
        best_d = np.full(len(pts), np.inf)
        best_c = np.zeros(len(pts), dtype=np.int64)
        best_p = np.zeros((len(pts), 2))
        for j in range(k):
            q, d = _closest_point_on_triangle(pts, x[:, j])
            better = d < best_d
            best_d[better] = d[better]
            best_c[better] = cand[better, j]
            best_p[better] = q[better]
        lam = _bary(self.mesh, best_c[:, None], best_p[:, None, :])[:, 0]
        lam = np.clip(lam, 0.0, None)
        lam /= lam.sum(axis=1, keepdims=True)
        return best_c, lam


def _bary(mesh, cells, pts):
    """Barycentric coordinates of ``pts`` (..., 2) w.r.t. ``cells`` (...)."""
    g = mesh.grad_lambda[cells]  # (..., 3, 2)
    x0 = mesh.cell_coords[cells][..., 0, :]
    d = pts - x0
    l1 = np.einsum("...d,...d->...", g[..., 1, :], d)
    l2 = np.einsum("...d,...d->...", g[..., 2, :], d)
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def _closest_point_on_triangle(p, tri):
    """Closest points of triangles ``tri`` (n, 3, 2) to points ``p`` (n, 2)."""
    best = np.full(len(p), np.inf)
    q = np.zeros_like(p)
    for i in range(3):
        a = tri[:, i]
        b = tri[:, (i + 1) % 3]
        ab = b - a
        t = np.einsum("nd,nd->n", p - a, ab) / np.einsum("nd,nd->n", ab, ab)
        t = np.clip(t, 0.0, 1.0)
        c = a + t[:, None] * ab
        d = np.linalg.norm(p - c, axis=1)
        better = d < best
        best[better] = d[better]
        q[better] = c[better]
    return q, best


def locate_point(mesh, p):
    """Locate a single point ``p = (r, z)`` in ``mesh``."""
    cells, bary, inside = mesh.locator.locate(np.asarray(p, dtype=float).reshape(1, 2))
    lam = bary[0]
    if not inside[0]:
        status = "outside"
    elif lam.min() <= INSIDE_TOL:
        status = "on-boundary"
    else:
        status = "inside"
    return PointLocation(int(cells[0]), lam, status)
