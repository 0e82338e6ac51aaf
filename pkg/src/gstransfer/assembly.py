"""Quadrature, weighted form assembly and a Jacobi-preconditioned CG solver."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .spaces import FunctionSpace, perp


class SolverError(RuntimeError):
    """Iterative solve failed; ``residual`` holds the final relative residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class AssemblyError(ValueError):
    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


@dataclass(frozen=True)
class Quadrature:
    """Triangle rule in barycentric coordinates; weights sum to one."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n(self):
        return len(self.weights)


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)], [w] * 3


@lru_cache(maxsize=None)
def quadrature(degree=4):
    """Symmetric triangle rule exact up to ``degree`` (1, 2 or 4)."""
    if degree <= 1:
        pts, wts, exact = [(1 / 3, 1 / 3, 1 / 3)], [1.0], 1
    elif degree == 2:
        pts, wts = _orbit3(1 / 6, 1 / 3)
        exact = 2
    elif degree <= 4:
        # Dunavant 6-point rule
        p1, w1 = _orbit3(0.445948490915965, 0.223381589678011)
        p2, w2 = _orbit3(0.091576213509771, 0.109951743655322)
        pts, wts, exact = p1 + p2, w1 + w2, 4
    else:
        raise ValueError(f"no rule of degree {degree}")
    q = Quadrature(np.array(pts), np.array(wts), exact)
    q.points.flags.writeable = False
    q.weights.flags.writeable = False
    return q


@dataclass(frozen=True)
class CellQuadrature:
    """Quadrature points of every cell, flattened cell-major."""

    cells: np.ndarray  # (nc*nq,)
    bary: np.ndarray  # (nc*nq, 3)
    points: np.ndarray  # (nc*nq, 2)
    weights: np.ndarray  # (nc*nq,) physical weights (area included)
    nq: int


def cell_quadrature(mesh, degree=4):
    q = quadrature(degree)
    nc = mesh.n_cells
    cells = np.repeat(np.arange(nc), q.n)
    bary = np.tile(q.points, (nc, 1))
    weights = (mesh.area[:, None] * q.weights[None, :]).ravel()
    return CellQuadrature(cells, bary, mesh.to_physical(cells, bary), weights, q.n)


def _weight_values(weight, points):
    if callable(weight):
        return np.asarray(weight(points), dtype=float).reshape(len(points))
    r = points[:, 0]
    if weight in (1, "1", None):
        return np.ones_like(r)
    if weight == "r":
        return r
    if weight == "1/r":
        return 1.0 / r
    raise ValueError(f"unknown weight {weight!r}")


def assemble_weighted_mass(space: FunctionSpace, weight="1", degree=4):
    """Sparse ``M[i, j] = int w(r) phi_i . phi_j dA``."""
    cq = cell_quadrature(space.mesh, degree)
    phi = space.basis(cq.cells, cq.bary)
    w = cq.weights * _weight_values(weight, cq.points)
    nc, nq, nl = space.mesh.n_cells, cq.nq, space.nloc
    if phi.ndim == 3:
        local = np.einsum("n,nid,njd->nij", w, phi, phi)
    else:
        local = np.einsum("n,ni,nj->nij", w, phi, phi)
    local = local.reshape(nc, nq, nl, nl).sum(axis=1)
    return _scatter_matrix(space, space, local)


def assemble_bilinear(trial: FunctionSpace, test: FunctionSpace, trial_op="value",
                      test_op="value", weight="1", degree=4):
    """Sparse ``A[i, j] = int w (test_op phi_i) . (trial_op psi_j) dA``."""
    if not trial.mesh.same_as(test.mesh):
        raise ValueError("trial and test spaces must share a mesh")
    cq = cell_quadrature(test.mesh, degree)
    a = test.basis(cq.cells, cq.bary, test_op)
    b = trial.basis(cq.cells, cq.bary, trial_op)
    if a.ndim != b.ndim:
        raise ValueError("operator results must have matching rank")
    w = cq.weights * _weight_values(weight, cq.points)
    if a.ndim == 3:
        local = np.einsum("n,nid,njd->nij", w, a, b)
    else:
        local = np.einsum("n,ni,nj->nij", w, a, b)
    nc = test.mesh.n_cells
    local = local.reshape(nc, cq.nq, test.nloc, trial.nloc).sum(axis=1)
    return _scatter_matrix(test, trial, local)


def _scatter_matrix(test, trial, local):
    rows = np.broadcast_to(test.dofs[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(trial.dofs[:, None, :], local.shape).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(test.ndofs, trial.ndofs))
    return A.tocsr()


def _scatter_vector(space, local):
    return np.bincount(space.dofs.ravel(), weights=local.ravel(), minlength=space.ndofs)


def _check_finite(values, cells):
    bad = ~np.isfinite(values)
    if bad.any():
        idx = np.flatnonzero(bad.reshape(len(cells), -1).any(axis=1))[0]
        raise AssemblyError(f"non-finite integrand in cell {cells[idx]}", cell=int(cells[idx]))


def assemble_linear_form(space: FunctionSpace, integrand, test="value", degree=4):
    """Vector ``b[i] = int integrand . (test phi_i) dA``.

    ``integrand(points, cells, bary)`` is called once with every quadrature
    point of the mesh and must return values matching the rank of ``test``
    applied to the space's basis (scalar for ``div``/``curl`` of vectors,
    2-vector for ``grad``/``perp_grad`` of scalars).
    """
    cq = cell_quadrature(space.mesh, degree)
    vals = np.asarray(integrand(cq.points, cq.cells, cq.bary), dtype=float)
    _check_finite(vals, cq.cells)
    phi = space.basis(cq.cells, cq.bary, test)
    if phi.ndim == 3:
        vals = np.broadcast_to(vals, (len(cq.cells), 2))
        local = np.einsum("n,nd,nid->ni", cq.weights, vals, phi)
    else:
        vals = np.broadcast_to(vals, (len(cq.cells),))
        local = np.einsum("n,n,ni->ni", cq.weights, vals, phi)
    local = local.reshape(space.mesh.n_cells, cq.nq, space.nloc).sum(axis=1)
    return _scatter_vector(space, local)


@dataclass(frozen=True)
class BoundaryQuadrature:
    """Quadrature along the mesh boundary.

    Each point carries its boundary-edge slot, owning cell, barycentrics in
    that cell, the outward unit normal and the physical weight.
    """

    slot: np.ndarray
    cells: np.ndarray
    bary: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    @property
    def tangents(self):
        """Counterclockwise unit tangent, equal to ``perp(normal)``."""
        return perp(self.normals)


def boundary_quadrature(mesh, breaks=None, n_gauss=3):
    """Gauss-Legendre points on every boundary edge.

    Parameters
    ----------
    breaks : list of arrays, optional
        Per boundary edge (in ``mesh.boundary_edges`` order) the sorted interior
        break parameters in (0, 1), measured from the edge's counterclockwise
        start.  Each sub-segment gets its own Gauss rule, so integrands that
        are only piecewise smooth along the edge remain exactly integrated.
    """
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    nb = len(mesh.boundary_edges)
    cells = mesh.boundary_cells
    loc = mesh.boundary_local
    a_idx = mesh.cells[cells, (loc + 1) % 3]
    b_idx = mesh.cells[cells, (loc + 2) % 3]
    a, b = mesh.vertices[a_idx], mesh.vertices[b_idx]

    slot, tt, ww = [], [], []
    for k in range(nb):
        knots = np.concatenate([[0.0], [] if breaks is None else breaks[k], [1.0]])
        for t0, t1 in zip(knots[:-1], knots[1:]):
            h = t1 - t0
            if h <= 0:
                continue
            slot.append(np.full(n_gauss, k))
            tt.append(t0 + 0.5 * h * (xg + 1.0))
            ww.append(0.5 * h * wg)
    slot = np.concatenate(slot)
    t = np.concatenate(tt)
    w = np.concatenate(ww) * mesh.boundary_lengths[slot]
    bary = np.zeros((len(t), 3))
    lk = loc[slot]
    bary[np.arange(len(t)), (lk + 1) % 3] = 1.0 - t
    bary[np.arange(len(t)), (lk + 2) % 3] = t
    pts = a[slot] + t[:, None] * (b[slot] - a[slot])
    return BoundaryQuadrature(slot, cells[slot], bary, pts, mesh.boundary_normals[slot], w)


def assemble_boundary_form(space: FunctionSpace, integrand, test="value", bq=None):
    """Vector ``b[i] = oint integrand * (trace of phi_i) dS``.

    ``test`` selects the trace: ``value`` (scalar spaces, or vector spaces
    with a vector integrand), ``normal`` (phi . n) or ``n_perp``
    (phi . n_perp with ``n_perp = (-n_z, n_r)``).  ``integrand(points, bq)``
    receives the boundary quadrature for access to normals and edge slots.
    """
    mesh = space.mesh
    if bq is None:
        bq = boundary_quadrature(mesh)
    vals = np.asarray(integrand(bq.points, bq), dtype=float)
    _check_finite(vals, bq.cells)
    phi = space.basis(bq.cells, bq.bary)
    if test == "normal":
        phi = np.einsum("nid,nd->ni", phi, bq.normals)
    elif test == "n_perp":
        phi = np.einsum("nid,nd->ni", phi, perp(bq.normals))
    elif test != "value":
        raise ValueError(f"unknown boundary test {test!r}")
    if phi.ndim == 3:
        vals = np.broadcast_to(vals, (len(bq.weights), 2))
        contrib = np.einsum("n,nd,nid->ni", bq.weights, vals, phi)
    else:
        vals = np.broadcast_to(vals, (len(bq.weights),))
        contrib = (bq.weights * vals)[:, None] * phi
    dofs = space.dofs[bq.cells]
    return np.bincount(dofs.ravel(), weights=contrib.ravel(), minlength=space.ndofs)


def solve_spd(A, b, rel_tol=1e-12, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Convergence is declared on the true residual ``|Ax - b| / |b|``.

    Raises
    ------
    SolverError
        After ``10 n`` iterations without convergence.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = len(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has a non-positive diagonal", np.inf)
    dinv = 1.0 / d
    if maxiter is None:
        maxiter = 10 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    it = 0
    res = np.linalg.norm(r) / bnorm
    while it < maxiter:
        if res <= rel_tol:
            true = np.linalg.norm(b - A @ x) / bnorm
            if true <= rel_tol:
                return x
            # restart from the true residual after rounding drift
            r = b - A @ x
            z = dinv * r
            p = z.copy()
            rz = r @ z
            res = true
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("matrix is not positive definite", res)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        res = np.linalg.norm(r) / bnorm
        it += 1
    true = np.linalg.norm(b - A @ x) / bnorm
    if true <= rel_tol:
        return x
    raise SolverError(f"PCG did not converge in {maxiter} iterations (residual {true:.3e})", true)
