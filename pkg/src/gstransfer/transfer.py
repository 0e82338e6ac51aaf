"""Projection of (psi, f) onto discrete B, J, div B and Lorentz-force fields.

Three projection paths fix the finite element spaces::

    path  Bp    Bt   Jp    Jt   Db   Fp    Ft
    A     RT1   DG0  N1    CG1  DG0  RT1   DG0
    B     N1    CG1  RT1   DG0  CG1  N1    CG1
    C     VCG1  CG1  VCG1  CG1  CG1  VCG1  CG1

Every projection is an r-weighted (``rweight="multiply"``) or unweighted
(``rweight="divide"``, right-hand side divided by r) mass-matrix solve.
Continuous identities used throughout (``perp`` rotates by +90 degrees)::

    Bp = perp_grad(psi) / r          Bt = f / r
    Jp = perp_grad(r Bt) / r         Jt = -curl(Bp)
    Db = div(r Bp) / r
    [BxJ]_p = -Bt perp(Jp) + Jt perp(Bp)
    [BxJ]_t = Bp . perp(Jp)

Derivatives of products such as ``perp_grad(r eta) = eta e_z + r perp_grad(eta)``
are expanded analytically at quadrature points.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .assembly import (
    assemble_boundary_form,
    assemble_linear_form,
    assemble_weighted_mass,
    boundary_quadrature,
    solve_spd,
)
from .equilibria import EquilibriumInput
from .mesh import Mesh2D
from .spaces import Field, FunctionSpace, SpaceKind, perp

PATH_SPACES = {
    "A": dict(Bp="RT1", Bt="DG0", Jp="N1", Jt="CG1", Db="DG0", Fp="RT1", Ft="DG0"),
    "B": dict(Bp="N1", Bt="CG1", Jp="RT1", Jt="DG0", Db="CG1", Fp="N1", Ft="CG1"),
    "C": dict(Bp="VCG1", Bt="CG1", Jp="VCG1", Jt="CG1", Db="CG1", Fp="VCG1", Ft="CG1"),
}
FIELD_NAMES = ("Bp", "Bt", "Jp", "Jt", "Db", "Fp", "Ft")

E_R = np.array([1.0, 0.0])
E_Z = np.array([0.0, 1.0])


class TransferError(RuntimeError):
    """Transfer could not be carried out (e.g. target far outside the source)."""


@dataclass(frozen=True)
class TransferConfig:
    path: str = "A"
    rweight: str = "multiply"
    solver_tol: float = 1e-12
    source_eval: str = "aligned"
    max_outside_fraction: float = 0.10

    def __post_init__(self):
        if self.path not in PATH_SPACES:
            raise ValueError(f"unknown path {self.path!r}; expected A, B or C")
        if self.rweight not in ("multiply", "divide"):
            raise ValueError(f"unknown rweight {self.rweight!r}")
        if self.source_eval not in ("aligned", "cross"):
            raise ValueError(f"unknown source_eval {self.source_eval!r}")
        if not self.solver_tol > 0:
            raise ValueError("solver_tol must be positive")

    @property
    def multiply(self):
        return self.rweight == "multiply"

    def space(self, name):
        return PATH_SPACES[self.path][name]


@dataclass(frozen=True)
class TransferResult:
    Bp: Field
    Bt: Field
    Jp: Field
    Jt: Field
    Db: Field
    Fp: Field
    Ft: Field
    config: TransferConfig
    info: dict = field(default_factory=dict)

    def fields(self):
        return {name: getattr(self, name) for name in FIELD_NAMES}

    def check_spaces(self):
        """Raise if any field's kind disagrees with the path table."""
        table = PATH_SPACES[self.config.path]
        for name, fld in self.fields().items():
            if fld.kind.value != table[name]:
                raise AssertionError(f"{name} is {fld.kind.value}, expected {table[name]}")
        return True


# -- source access ---------------------------------------------------------------


class SourceSampler:
    """Evaluates equilibrium data on a target mesh.

    ``aligned`` reuses the source DOFs directly (meshes must be identical);
    ``cross`` locates target points in the source mesh.  Auxiliary CG1 copies
    of psi and f on the target, needed by strong derivatives, are r-weighted L2
    projections in the cross case.
    """

    def __init__(self, eq: EquilibriumInput, target: Mesh2D, config: TransferConfig):
        self.eq = eq
        self.target = target
        self.config = config
        self.aligned = config.source_eval == "aligned"
        self._mass = {}
        if self.aligned:
            if not target.same_as(eq.mesh):
                raise TransferError("aligned source evaluation needs the target mesh to equal "
                                    "the source mesh; use source_eval='cross'")
            self.outside_fraction = 0.0
        else:
            from .assembly import cell_quadrature

            cq = cell_quadrature(target)
            _, _, inside = eq.mesh.locator.locate(cq.points)
            self.outside_fraction = float(1.0 - inside.mean())
            if self.outside_fraction > config.max_outside_fraction:
                raise TransferError(
                    f"{100 * self.outside_fraction:.1f}% of target quadrature points lie outside "
                    f"the source mesh (limit {100 * config.max_outside_fraction:.0f}%)")

    # values of source fields at target points
    def sample(self, fld: Field, cells, bary, points, op="value"):
        if self.aligned:
            return fld.evaluate(cells, bary, op)
        return fld.at_points(points, op)

    def psi(self, cells, bary, points):
        return self.sample(self.eq.psi, cells, bary, points)

    def f(self, cells, bary, points):
        return self.sample(self.eq.f, cells, bary, points)

    def mass(self, space, weight):
        key = (space.kind, weight)
        if key not in self._mass:
            self._mass[key] = assemble_weighted_mass(space, weight)
        return self._mass[key]

    def _aux(self, fld):
        V = FunctionSpace(self.target, "CG1")
        if self.aligned:
            return Field(V, fld.coeffs)
        rhs = assemble_linear_form(V, lambda p, c, b: p[:, 0] * self.sample(fld, c, b, p))
        return Field(V, solve_spd(self.mass(V, "r"), rhs, self.config.solver_tol))

    @cached_property
    def psi_aux(self):
        return self._aux(self.eq.psi)

    @cached_property
    def f_aux(self):
        return self._aux(self.eq.f)

    @cached_property
    def boundary_trace(self):
        """Continuous piecewise-linear psi along the target boundary.

        Returns ``(bq, psi_b, dpsi_ds)``: a boundary quadrature whose
        sub-segments break wherever the source field has a kink, the trace
        value and its counterclockwise arc-length derivative at each point.
        """
        t = self.target
        if self.aligned:
            bq = boundary_quadrature(t)
            vals = self.eq.psi.coeffs
            a, b = _boundary_endpoints(t)
            pa, pb = vals[a], vals[b]
            s = bq.bary[np.arange(len(bq.slot)), (t.boundary_local[bq.slot] + 2) % 3]
            psi_b = pa[bq.slot] + s * (pb[bq.slot] - pa[bq.slot])
            dpsi = ((pb - pa) / t.boundary_lengths)[bq.slot]
            return bq, psi_b, dpsi
        breaks = _source_breaks(t, self.eq.mesh)
        bq = boundary_quadrature(t, breaks)
        a, b = _boundary_endpoints(t)
        A, B = t.vertices[a], t.vertices[b]
        psi_b = np.empty(len(bq.slot))
        dpsi = np.empty(len(bq.slot))
        ng = 3
        for k in range(len(a)):
            knots = np.concatenate([[0.0], breaks[k], [1.0]])
            knots = knots[np.concatenate([[True], np.diff(knots) > 0])]
            pts = A[k] + knots[:, None] * (B[k] - A[k])
            vals = self.eq.psi.at_points(pts)
            sel = np.flatnonzero(bq.slot == k)
            for j in range(len(knots) - 1):
                idx = sel[j * ng : (j + 1) * ng]
                h = knots[j + 1] - knots[j]
                s = (np.einsum("nd,d->n", bq.points[idx] - A[k], B[k] - A[k])
                     / np.dot(B[k] - A[k], B[k] - A[k]) - knots[j]) / h
                psi_b[idx] = vals[j] + s * (vals[j + 1] - vals[j])
                dpsi[idx] = (vals[j + 1] - vals[j]) / (h * t.boundary_lengths[k])
        return bq, psi_b, dpsi


def _boundary_endpoints(mesh):
    c = mesh.cells[mesh.boundary_cells]
    rows = np.arange(len(c))
    loc = mesh.boundary_local
    return c[rows, (loc + 1) % 3], c[rows, (loc + 2) % 3]


def _source_breaks(target, source, tol=1e-12):
    """Parameters along each target boundary edge where source edges cross it."""
    a, b = _boundary_endpoints(target)
    A, B = target.vertices[a], target.vertices[b]
    P = source.vertices[source.edges[:, 0]]
    Q = source.vertices[source.edges[:, 1]]
    out = []
    for k in range(len(A)):
        d = B[k] - A[k]
        L2 = d @ d
        e = Q - P
        w = P - A[k]
        den = d[0] * e[:, 1] - d[1] * e[:, 0]
        ts = []
        ok = np.abs(den) > tol * np.sqrt(L2) * np.linalg.norm(e, axis=1)
        # proper crossings
        t = (w[ok, 0] * e[ok, 1] - w[ok, 1] * e[ok, 0]) / den[ok]
        u = (w[ok, 0] * d[1] - w[ok, 1] * d[0]) / den[ok]
        hit = (u >= -tol) & (u <= 1 + tol)
        ts.append(t[hit])
        # source vertices lying on the target edge (collinear overlaps)
        V = source.vertices - A[k]
        tv = V @ d / L2
        dist = np.abs(V[:, 0] * d[1] - V[:, 1] * d[0]) / np.sqrt(L2)
        ts.append(tv[dist <= 1e-10 * np.sqrt(L2)])
        t = np.concatenate(ts)
        t = np.unique(t[(t > 1e-9) & (t < 1 - 1e-9)])
        if len(t):
            t = t[np.concatenate([[True], np.diff(t) > 1e-9])]
        out.append(t)
    return out


def _sampler(equilibrium, target, config):
    if isinstance(equilibrium, SourceSampler):
        return equilibrium
    return SourceSampler(equilibrium, target, config)


def _solve(space, rhs, config, sampler=None):
    weight = "r" if config.multiply else "1"
    M = sampler.mass(space, weight) if sampler is not None else assemble_weighted_mass(space, weight)
    return Field(space, solve_spd(M, rhs, config.solver_tol))


def _expect(fld, kind, what):
    if fld.kind.value != kind:
        raise ValueError(f"{what} must be {kind} for this path, got {fld.kind.value}")


def _qp(fld, cells, bary, op="value"):
    return fld.evaluate(cells, bary, op)


def _scale(v, r, power):
    """``v * r**power`` for scalar or vector values."""
    f = r**power
    return v * (f[:, None] if np.ndim(v) == 2 else f)


# -- magnetic field ------------------------------------------------------------------


def compute_Bp(config: TransferConfig, equilibrium, target_mesh: Mesh2D) -> Field:
    """Poloidal field in the path's B_p space."""
    src = _sampler(equilibrium, target_mesh, config)
    V = FunctionSpace(target_mesh, config.space("Bp"))
    p = -1 if not config.multiply else 0
    if config.path in ("A", "C"):
        psi = src.psi_aux
        rhs = assemble_linear_form(
            V, lambda x, c, b: _scale(_qp(psi, c, b, "perp_grad"), x[:, 0], p))
        return _solve(V, rhs, config, src)

    # weak curl-conforming form, psi sampled directly at quadrature points
    bq, psi_b, _ = src.boundary_trace
    if config.multiply:
        rhs = -assemble_linear_form(V, lambda x, c, b: src.psi(c, b, x), test="curl")
        rhs += assemble_boundary_form(V, lambda x, q: psi_b, test="n_perp", bq=bq)
    else:
        # perp-div(S / r) = curl(S) / r - S_z / r^2
        rhs = -assemble_linear_form(V, lambda x, c, b: src.psi(c, b, x) / x[:, 0], test="curl")
        rhs += assemble_linear_form(
            V, lambda x, c, b: np.outer(src.psi(c, b, x) / x[:, 0] ** 2, E_Z))
        rhs += assemble_boundary_form(V, lambda x, q: psi_b / x[:, 0], test="n_perp", bq=bq)
    return _solve(V, rhs, config, src)


def compute_Bt(config: TransferConfig, equilibrium, target_mesh: Mesh2D) -> Field:
    """Toroidal field ``f / r`` projected into the path's B_t space."""
    src = _sampler(equilibrium, target_mesh, config)
    V = FunctionSpace(target_mesh, config.space("Bt"))
    p = 0 if config.multiply else -1
    rhs = assemble_linear_form(V, lambda x, c, b: _scale(src.f(c, b, x), x[:, 0], p))
    return _solve(V, rhs, config, src)


# -- current density ---------------------------------------------------------------------


def compute_Jp(config: TransferConfig, Bt: Field, sampler=None) -> Field:
    """Poloidal current from the toroidal field."""
    _expect(Bt, config.space("Bt"), "Bt")
    mesh = Bt.mesh
    V = FunctionSpace(mesh, config.space("Jp"))
    if config.path == "A":
        bq = boundary_quadrature(mesh)
        if sampler is not None:
            # r Bt = f: the DG0 field has no trace, so take it from the source
            rbt_b = sampler.f(bq.cells, bq.bary, bq.points)
        else:
            rbt_b = bq.points[:, 0] * Bt.evaluate(bq.cells, bq.bary)
        if config.multiply:
            rhs = -assemble_linear_form(V, lambda x, c, b: x[:, 0] * Bt.evaluate(c, b), test="curl")
            rhs += assemble_boundary_form(V, lambda x, q: rbt_b, test="n_perp", bq=bq)
        else:
            # perp-div(S / r) paired with r Bt
            rhs = -assemble_linear_form(V, lambda x, c, b: Bt.evaluate(c, b), test="curl")
            rhs += assemble_linear_form(
                V, lambda x, c, b: np.outer(Bt.evaluate(c, b) / x[:, 0], E_Z))
            rhs += assemble_boundary_form(V, lambda x, q: rbt_b / x[:, 0], test="n_perp", bq=bq)
        return _solve(V, rhs, config, sampler)

    p = 0 if config.multiply else -1

    def integrand(x, c, b):
        # perp_grad(r Bt) = Bt e_z + r perp_grad(Bt)
        g = np.outer(Bt.evaluate(c, b), E_Z) + x[:, :1] * Bt.evaluate(c, b, "perp_grad")
        return _scale(g, x[:, 0], p)

    return _solve(V, assemble_linear_form(V, integrand), config, sampler)


def compute_Jt(config: TransferConfig, Bp: Field, sampler=None) -> Field:
    """Toroidal current ``-curl(Bp)`` in the path's J_t space."""
    _expect(Bp, config.space("Bp"), "Bp")
    mesh = Bp.mesh
    V = FunctionSpace(mesh, config.space("Jt"))
    if config.path == "A":
        bq = boundary_quadrature(mesh)
        flux = np.einsum("nd,nd->n", Bp.evaluate(bq.cells, bq.bary), bq.tangents)
        if config.multiply:
            # <r eta, Jt> = <perp_grad(r eta), Bp> - oint r eta Bp . n_perp
            rhs = assemble_linear_form(V, lambda x, c, b: Bp.evaluate(c, b)[:, 1])
            rhs += assemble_linear_form(V, lambda x, c, b: x[:, :1] * Bp.evaluate(c, b),
                                        test="perp_grad")
            rhs -= assemble_boundary_form(V, lambda x, q: x[:, 0] * flux, bq=bq)
        else:
            rhs = assemble_linear_form(V, lambda x, c, b: Bp.evaluate(c, b), test="perp_grad")
            rhs -= assemble_boundary_form(V, lambda x, q: flux, bq=bq)
        return _solve(V, rhs, config, sampler)

    p = 1 if config.multiply else 0
    rhs = assemble_linear_form(V, lambda x, c, b: -Bp.evaluate(c, b, "curl") * x[:, 0] ** p)
    return _solve(V, rhs, config, sampler)


def compute_J_direct(equilibrium, target_mesh, rweight="multiply", config=None, sampler=None):
    """Reference current computed straight from psi and f.

    Returns ``(Jp, Jt)`` with ``Jp`` in RT1 and ``Jt`` in CG1, using
    ``Jp = perp_grad(f) / r`` and ``Jt = -div(grad(psi) / r)``.
    """
    if config is None:
        source_eval = "aligned" if target_mesh.same_as(equilibrium.mesh) else "cross"
        config = TransferConfig(path="A", rweight=rweight, source_eval=source_eval)
    else:
        config = replace(config, rweight=rweight)
    src = sampler if sampler is not None else SourceSampler(equilibrium, target_mesh, config)
    psi, f = src.psi_aux, src.f_aux
    W = FunctionSpace(target_mesh, "RT1")
    V = FunctionSpace(target_mesh, "CG1")
    bq = boundary_quadrature(target_mesh)
    dpsi_n = np.einsum("nd,nd->n", psi.evaluate(bq.cells, bq.bary, "grad"), bq.normals)
    if config.multiply:
        rhs_p = assemble_linear_form(W, lambda x, c, b: f.evaluate(c, b, "perp_grad"))
        # <grad(r eta), grad(psi) / r> = <eta, psi_r / r> + <grad eta, grad psi>
        rhs_t = assemble_linear_form(V, lambda x, c, b: psi.evaluate(c, b, "grad")[:, 0] / x[:, 0])
        rhs_t += assemble_linear_form(V, lambda x, c, b: psi.evaluate(c, b, "grad"), test="grad")
        rhs_t -= assemble_boundary_form(V, lambda x, q: dpsi_n, bq=bq)
    else:
        rhs_p = assemble_linear_form(W, lambda x, c, b: f.evaluate(c, b, "perp_grad") / x[:, :1])
        rhs_t = assemble_linear_form(V, lambda x, c, b: psi.evaluate(c, b, "grad") / x[:, :1],
                                     test="grad")
        rhs_t -= assemble_boundary_form(V, lambda x, q: dpsi_n / x[:, 0], bq=bq)
    return _solve(W, rhs_p, config, src), _solve(V, rhs_t, config, src)


# -- divergence ------------------------------------------------------------------------------


def compute_divergence(config: TransferConfig, Bp: Field, psi_source=None, include_g1=True,
                       sampler=None) -> Field:
    """Discrete ``Db = div(r Bp) / r`` in the path's divergence space.

    Path B uses the weak divergence whose boundary datum ``g1 = n . Bp`` is
    taken from the source flux, ``r g1 = -d(psi)/ds``.  Setting
    ``include_g1=False`` drops that term (a negative control only).
    """
    _expect(Bp, config.space("Bp"), "Bp")
    mesh = Bp.mesh
    V = FunctionSpace(mesh, config.space("Db"))
    if config.path in ("A", "C"):
        def integrand(x, c, b):
            # div(r Bp) = Bp_r + r div(Bp)
            d = Bp.evaluate(c, b)[:, 0] + x[:, 0] * Bp.evaluate(c, b, "div")
            return d if config.multiply else d / x[:, 0]
        return _solve(V, assemble_linear_form(V, integrand), config, sampler)

    if sampler is None:
        if psi_source is None:
            raise ValueError("path B divergence needs the source psi for its boundary datum")
        sampler = _sampler(psi_source, mesh, config)
    bq, psi_b, dpsi = sampler.boundary_trace
    if config.multiply:
        # <eta, r Db> = -<r grad eta, Bp> + oint r eta g1
        rhs = -assemble_linear_form(V, lambda x, c, b: x[:, :1] * Bp.evaluate(c, b), test="grad")
        if include_g1:
            rhs -= assemble_boundary_form(V, lambda x, q: dpsi, bq=bq)
    else:
        # <eta, Db> = -<grad eta, Bp> + <eta, Bp_r / r> + oint eta g1, with the
        # lower-order term written through psi: Bp_r / r = -psi_z / r^2, then
        # integrated by parts in z.
        rhs = -assemble_linear_form(V, lambda x, c, b: Bp.evaluate(c, b), test="grad")
        rhs += assemble_linear_form(
            V, lambda x, c, b: np.outer(sampler.psi(c, b, x) / x[:, 0] ** 2, E_Z), test="grad")
        rhs -= assemble_boundary_form(V, lambda x, q: psi_b * q.normals[:, 1] / x[:, 0] ** 2, bq=bq)
        if include_g1:
            rhs -= assemble_boundary_form(V, lambda x, q: dpsi / x[:, 0], bq=bq)
    return _solve(V, rhs, config, sampler)


# -- Lorentz force ------------------------------------------------------------------------------


def compute_lorentz(config: TransferConfig, Bp: Field, Bt: Field, Jp=None, Jt=None, sampler=None):
    """Poloidal and toroidal Lorentz force, in the spaces of Bp and Bt."""
    _expect(Bp, config.space("Bp"), "Bp")
    _expect(Bt, config.space("Bt"), "Bt")
    mesh = Bp.mesh
    Vp = FunctionSpace(mesh, config.space("Fp"))
    Vt = FunctionSpace(mesh, config.space("Ft"))
    p = 1 if config.multiply else 0

    if config.path in ("A", "B"):
        if Jp is None or Jt is None:
            raise ValueError(f"path {config.path} needs Jp and Jt")
        _expect(Jp, config.space("Jp"), "Jp")
        _expect(Jt, config.space("Jt"), "Jt")

        def fp(x, c, b):
            g = (-Bt.evaluate(c, b)[:, None] * perp(Jp.evaluate(c, b))
                 + Jt.evaluate(c, b)[:, None] * perp(Bp.evaluate(c, b)))
            return g * x[:, :1] ** p

        def ft(x, c, b):
            g = np.einsum("nd,nd->n", Bp.evaluate(c, b), perp(Jp.evaluate(c, b)))
            return g * x[:, 0] ** p
    else:
        def grad_rbt(x, c, b):
            # grad(r Bt) = Bt e_r + r grad(Bt)
            return np.outer(Bt.evaluate(c, b), E_R) + x[:, :1] * Bt.evaluate(c, b, "grad")

        def fp(x, c, b):
            bt = Bt.evaluate(c, b)
            B = Bp.evaluate(c, b)
            g = (bt / x[:, 0])[:, None] * grad_rbt(x, c, b) \
                - Bp.evaluate(c, b, "curl")[:, None] * perp(B)
            return g * x[:, :1] ** p

        def ft(x, c, b):
            g = -np.einsum("nd,nd->n", Bp.evaluate(c, b), grad_rbt(x, c, b)) / x[:, 0]
            return g * x[:, 0] ** p

    Fp = _solve(Vp, assemble_linear_form(Vp, fp), config, sampler)
    Ft = _solve(Vt, assemble_linear_form(Vt, ft), config, sampler)
    return Fp, Ft


# -- pipeline -----------------------------------------------------------------------------------


def run_transfer(config: TransferConfig, equilibrium: EquilibriumInput, target_mesh=None):
    """Run the full chain Bp, Bt, Jp, Jt, Db, Lorentz for one configuration."""
    if target_mesh is None:
        target_mesh = equilibrium.mesh
    src = SourceSampler(equilibrium, target_mesh, config)
    Bp = compute_Bp(config, src, target_mesh)
    Bt = compute_Bt(config, src, target_mesh)
    Jp = compute_Jp(config, Bt, src)
    Jt = compute_Jt(config, Bp, src)
    Db = compute_divergence(config, Bp, sampler=src)
    Fp, Ft = compute_lorentz(config, Bp, Bt, Jp, Jt, src)
    info = {"outside_fraction": src.outside_fraction}
    result = TransferResult(Bp, Bt, Jp, Jt, Db, Fp, Ft, config, info)
    result.check_spaces()
    return result
