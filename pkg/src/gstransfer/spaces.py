"""Lowest-order compatible finite element spaces on triangles.

Five kinds are supported:

``CG1``   continuous piecewise linears (one DOF per vertex)
``DG0``   piecewise constants (one DOF per cell)
``RT1``   Raviart-Thomas, normal flux through each edge as DOF
``N1``    Nedelec (first kind), tangential circulation along each edge as DOF
``VCG1``  vector CG1, DOF ``v`` is the r-component at vertex ``v`` and
          ``v + nv`` the z-component

RT1 and N1 basis functions are written directly in physical coordinates
through barycentric coordinates; this is algebraically identical to the
contravariant / covariant Piola maps of the reference functions.

Planar operators follow the usual poloidal-plane conventions::

    grad u      = (u_r, u_z)
    perp_grad u = (-u_z, u_r)
    div A       = dA_r/dr + dA_z/dz
    curl A      = -dA_r/dz + dA_z/dr      (= perp-divergence of A)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mesh import Mesh2D, PointLocation


class SpaceKind(enum.Enum):
    CG1 = "CG1"
    DG0 = "DG0"
    RT1 = "RT1"
    N1 = "N1"
    VCG1 = "VCG1"

    @property
    def rank(self):
        return 0 if self in (SpaceKind.CG1, SpaceKind.DG0) else 1


SCALAR_OPS = ("value", "grad", "perp_grad")
VECTOR_OPS = ("value", "div", "curl")


def perp(v):
    """Rotate vectors by +90 degrees: ``(a, b) -> (-b, a)``."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


class FunctionSpace:
    """A finite element space of a given kind over a mesh.

    Attributes
    ----------
    dofs : ndarray, shape (nc, nloc)
        Global DOF index of each local basis function.
    signs : ndarray, shape (nc, nloc)
        +1/-1 orientation factor (all ones except RT1 and N1).
    """

    def __init__(self, mesh: Mesh2D, kind):
        self.mesh = mesh
        self.kind = SpaceKind(kind)
        nc, nv = mesh.n_cells, mesh.n_vertices
        k = self.kind
        if k is SpaceKind.CG1:
            self.dofs = mesh.cells
            self.signs = np.ones((nc, 3))
            self.ndofs = nv
        elif k is SpaceKind.DG0:
            self.dofs = np.arange(nc).reshape(-1, 1)
            self.signs = np.ones((nc, 1))
            self.ndofs = nc
        elif k in (SpaceKind.RT1, SpaceKind.N1):
            self.dofs = mesh.cell_edges
            self.signs = mesh.cell_edge_signs.astype(float)
            self.ndofs = mesh.n_edges
        else:
            self.dofs = np.concatenate([mesh.cells, mesh.cells + nv], axis=1)
            self.signs = np.ones((nc, 6))
            self.ndofs = 2 * nv

    @property
    def rank(self):
        return self.kind.rank

    @property
    def nloc(self):
        return self.dofs.shape[1]

    def __repr__(self):
        return f"FunctionSpace({self.kind.value}, ndofs={self.ndofs})"

    def __eq__(self, other):
        return (isinstance(other, FunctionSpace) and self.kind is other.kind
                and self.mesh.same_as(other.mesh))

    def __hash__(self):
        return hash((self.kind, id(self.mesh)))

    # -- basis evaluation -----------------------------------------------------

    def basis(self, cells, bary, op="value"):
        """Evaluate signed local basis functions (or a derivative).

        Parameters
        ----------
        cells : (n,) int
        bary : (n, 3) float
        op : str
            ``value`` for any kind; ``grad``/``perp_grad`` for scalar kinds;
            ``div``/``curl`` for vector kinds.

        Returns
        -------
        ndarray
            (n, nloc) for scalar results or (n, nloc, 2) for vector results.
        """
        cells = np.asarray(cells)
        bary = np.asarray(bary, dtype=float)
        k = self.kind
        if k.rank == 0 and op not in SCALAR_OPS or k.rank == 1 and op not in VECTOR_OPS:
            raise ValueError(f"operator {op!r} is not defined on {k.value}")
        if k is SpaceKind.DG0 and op != "value":
            raise ValueError("DG0 functions have no pointwise derivative")
        m = self.mesh
        n = len(cells)
        g = m.grad_lambda[cells]  # (n, 3, 2)
        sgn = self.signs[cells]

        if k is SpaceKind.DG0:
            return np.ones((n, 1))
        if k is SpaceKind.CG1:
            if op == "value":
                return bary.copy()
            return g.copy() if op == "grad" else perp(g)
        if k is SpaceKind.VCG1:
            if op == "value":
                out = np.zeros((n, 6, 2))
                out[:, :3, 0] = bary
                out[:, 3:, 1] = bary
                return out
            if op == "div":
                return np.concatenate([g[:, :, 0], g[:, :, 1]], axis=1)
            return np.concatenate([-g[:, :, 1], g[:, :, 0]], axis=1)

        area = m.area[cells]
        if k is SpaceKind.RT1:
            if op == "div":
                return sgn / area[:, None]
            if op == "curl":
                return np.zeros((n, 3))
            x = m.to_physical(cells, bary)
            xv = m.cell_coords[cells]
            return sgn[:, :, None] * (x[:, None, :] - xv) / (2.0 * area)[:, None, None]
        # N1 (Whitney)
        i1, i2 = [1, 2, 0], [2, 0, 1]
        if op == "div":
            return np.zeros((n, 3))
        if op == "curl":
            a, b = g[:, i1], g[:, i2]
            return 2.0 * sgn * (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
        w = bary[:, i1, None] * g[:, i2] - bary[:, i2, None] * g[:, i1]
        return sgn[:, :, None] * w

    # -- interpolation ----------------------------------------------------------

    def interpolate(self, func, n_gauss=3):
        """Canonical interpolant of ``func(points) -> values``.

        CG1/VCG1 use nodal values, DG0 the cell mean, RT1 edge normal flux and
        N1 edge tangential circulation (Gauss-Legendre along each edge).
        """
        m = self.mesh
        k = self.kind
        if k is SpaceKind.CG1:
            c = np.asarray(func(m.vertices), dtype=float).reshape(m.n_vertices)
        elif k is SpaceKind.VCG1:
            v = np.asarray(func(m.vertices), dtype=float).reshape(m.n_vertices, 2)
            c = np.concatenate([v[:, 0], v[:, 1]])
        elif k is SpaceKind.DG0:
            from .assembly import quadrature

            q = quadrature(4)
            cells = np.repeat(np.arange(m.n_cells), q.n)
            bary = np.tile(q.points, (m.n_cells, 1))
            vals = np.asarray(func(m.to_physical(cells, bary)), dtype=float)
            c = vals.reshape(m.n_cells, q.n) @ q.weights
        else:
            xg, wg = np.polynomial.legendre.leggauss(n_gauss)
            t = 0.5 * (xg + 1.0)
            a = m.vertices[m.edges[:, 0]]
            b = m.vertices[m.edges[:, 1]]
            d = b - a
            if k is SpaceKind.RT1:
                direction = np.stack([d[:, 1], -d[:, 0]], axis=1)  # normal times length
            else:
                direction = d  # tangent times length
            c = np.zeros(m.n_edges)
            for tj, wj in zip(t, wg):
                vals = np.asarray(func(a + tj * d), dtype=float).reshape(-1, 2)
                c += 0.5 * wj * np.einsum("ed,ed->e", vals, direction)
        return Field(self, c)


@dataclass(frozen=True, eq=False)
class Field:
    """Coefficient vector bound to a :class:`FunctionSpace`."""

    space: FunctionSpace
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if c.shape != (self.space.ndofs,):
            raise ValueError(f"expected {self.space.ndofs} coefficients, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise ValueError("field coefficients must be finite")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def mesh(self):
        return self.space.mesh

    @property
    def kind(self):
        return self.space.kind

    def evaluate(self, cells, bary, op="value"):
        """Vectorised evaluation of the field (or a derivative) at many points."""
        phi = self.space.basis(cells, bary, op)
        c = self.coeffs[self.space.dofs[cells]]
        if phi.ndim == 3:
            return np.einsum("nk,nkd->nd", c, phi)
        return np.einsum("nk,nk->n", c, phi)

    def at_points(self, points, op="value"):
        """Evaluate at physical points, using nearest-cell clamping outside."""
        cells, bary, _ = self.mesh.locator.locate(points)
        return self.evaluate(cells, bary, op)

    def cell_average(self):
        """Value at each cell centroid (exact mean for m=1 spaces)."""
        nc = self.mesh.n_cells
        return self.evaluate(np.arange(nc), np.full((nc, 3), 1.0 / 3.0))

    def __add__(self, other):
        _check_same(self, other)
        return Field(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same(self, other)
        return Field(self.space, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return Field(self.space, float(scalar) * self.coeffs)

    __rmul__ = __mul__


def _check_same(a, b):
    if a.space != b.space:
        raise ValueError("fields live on different spaces")


def build_space(mesh, kind):
    return FunctionSpace(mesh, kind)


def _single(field, loc):
    if loc.cell < 0 or loc.cell >= field.mesh.n_cells:
        raise ValueError("location does not belong to the field's mesh")
    return np.array([loc.cell]), np.asarray(loc.bary, dtype=float).reshape(1, 3)


def eval_field(field: Field, loc: PointLocation):
    """Field value at a located point: a float or a length-2 array."""
    cells, bary = _single(field, loc)
    v = field.evaluate(cells, bary)[0]
    return float(v) if np.ndim(v) == 0 else v


_DEFAULT_DERIVATIVE = {SpaceKind.CG1: "grad", SpaceKind.RT1: "div", SpaceKind.N1: "curl"}


def eval_strong_derivative(field: Field, loc: PointLocation, op=None):
    """Cellwise derivative of the discrete field at a located point.

    ``op`` defaults to the natural derivative of the kind: ``grad`` for CG1,
    ``div`` for RT1 and ``curl`` for N1.  VCG1 accepts ``div`` or ``curl``.
    """
    if op is None:
        try:
            op = _DEFAULT_DERIVATIVE[field.kind]
        except KeyError:
            raise ValueError(f"specify op for {field.kind.value}") from None
    if op == "value":
        raise ValueError("use eval_field for values")
    cells, bary = _single(field, loc)
    v = field.evaluate(cells, bary, op)[0]
    return float(v) if np.ndim(v) == 0 else v
