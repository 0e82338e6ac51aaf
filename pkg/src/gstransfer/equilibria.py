"""Equilibrium sources: manufactured vacuum fields, a linear fixed-boundary
Grad-Shafranov solve and G-EQDSK ingestion."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .assembly import assemble_bilinear, assemble_linear_form, solve_spd
from .mesh import Mesh2D, build_structured_mesh
from .spaces import Field, FunctionSpace


class EquilibriumError(ValueError):
    pass


@dataclass(frozen=True)
class Profile1D:
    """Piecewise-linear f(psi) table with constant extrapolation."""

    psi_samples: np.ndarray
    f_samples: np.ndarray

    def __post_init__(self):
        x = np.array(self.psi_samples, dtype=float).reshape(-1)
        y = np.array(self.f_samples, dtype=float).reshape(-1)
        if x.size == 0 or x.shape != y.shape:
            raise EquilibriumError("profile needs matching, non-empty sample arrays")
        if np.any(np.diff(x) <= 0):
            raise EquilibriumError("psi samples must be strictly ascending")
        object.__setattr__(self, "psi_samples", x)
        object.__setattr__(self, "f_samples", y)

    def __call__(self, psi):
        return np.interp(psi, self.psi_samples, self.f_samples)


def eval_profile(profile: Profile1D, psi_value):
    v = profile(psi_value)
    return float(v) if np.ndim(v) == 0 else v


@dataclass(frozen=True)
class EquilibriumInput:
    """Flux and toroidal field function as CG1 fields on the source mesh."""

    mesh: Mesh2D
    psi: Field
    f: Field
    psi_sep: float
    profile: Profile1D | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for fld in (self.psi, self.f):
            if fld.space.kind.value != "CG1" or fld.mesh is not self.mesh:
                raise EquilibriumError("psi and f must be CG1 fields on the equilibrium mesh")

    @property
    def psi_axis(self):
        """Nodal extremum of psi farthest from the separatrix value."""
        c = self.psi.coeffs
        lo, hi = c.min(), c.max()
        return float(hi if abs(hi - self.psi_sep) >= abs(lo - self.psi_sep) else lo)

    def save(self, path):
        """Store as a compressed ``.npz`` archive."""
        np.savez_compressed(
            path,
            vertices=self.mesh.vertices,
            cells=self.mesh.cells,
            region=self.mesh.region,
            psi=self.psi.coeffs,
            f=self.f.coeffs,
            psi_sep=self.psi_sep,
            profile_psi=np.array([]) if self.profile is None else self.profile.psi_samples,
            profile_f=np.array([]) if self.profile is None else self.profile.f_samples,
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as d:
            mesh = Mesh2D(d["vertices"], d["cells"], d["region"])
            V = FunctionSpace(mesh, "CG1")
            prof = None
            if d["profile_psi"].size:
                prof = Profile1D(d["profile_psi"], d["profile_f"])
            return cls(mesh, Field(V, d["psi"]), Field(V, d["f"]), float(d["psi_sep"]), prof)


def _boundary_min(mesh, values):
    return float(values[mesh.boundary_vertex_mask].min())


def manufactured_vacuum(mesh, c1, c2, c3, f0):
    """Vacuum field ``psi = c1 r^2 + c2 + c3 r^2 z`` with constant ``f = f0``.

    These satisfy the homogeneous Grad-Shafranov equation, so J and B x J
    vanish identically in the continuum.
    """
    V = FunctionSpace(mesh, "CG1")
    r, z = mesh.vertices[:, 0], mesh.vertices[:, 1]
    psi = c1 * r**2 + c2 + c3 * r**2 * z
    f = np.full(mesh.n_vertices, float(f0))
    return EquilibriumInput(mesh, Field(V, psi), Field(V, f), _boundary_min(mesh, psi),
                            meta={"source": "vacuum", "coeffs": (c1, c2, c3, f0)})


def gs_operator(mesh):
    """Stiffness ``K[i, j] = int (1/r) grad phi_i . grad phi_j dA`` on CG1."""
    V = FunctionSpace(mesh, "CG1")
    return V, assemble_bilinear(V, V, "grad", "grad", weight="1/r")


def solve_linear_gs(mesh, c, f0, rel_tol=1e-12):
    """Fixed-boundary zero-beta solve with ``f f' = c``.

    Solves ``int (1/r) grad psi . grad eta = int (c/r) eta`` with ``psi = 0`` on
    the boundary, then sets ``f = sqrt(f0^2 + 2 c psi)`` nodally.
    """
    if c < 0:
        raise EquilibriumError("source constant c must be non-negative")
    if f0 <= 0:
        raise EquilibriumError("vacuum field constant f0 must be positive")
    V, K = gs_operator(mesh)
    b = assemble_linear_form(V, lambda p, *_: c / p[:, 0])
    free = ~mesh.boundary_vertex_mask
    psi = np.zeros(mesh.n_vertices)
    if c != 0:
        Kff = K[free][:, free]
        psi[free] = solve_spd(Kff, b[free], rel_tol)
    radicand = f0**2 + 2.0 * c * psi
    if np.any(radicand < 0):
        raise EquilibriumError("negative radicand in f = sqrt(f0^2 + 2 c psi)")
    f = np.sqrt(radicand)
    return EquilibriumInput(mesh, Field(V, psi), Field(V, f), 0.0,
                            meta={"source": "linear-gs", "c": c, "f0": f0})


def gs_residual_dual_norm(eq: EquilibriumInput, reference_mesh: Mesh2D, c):
    """Dual norm of the linear GS residual measured on a finer nested mesh.

    ``psi`` is transferred to ``reference_mesh`` by nodal evaluation, the
    residual ``R(eta) = int (1/r) grad psi . grad eta - int (c/r) eta`` is
    assembled for interior test functions, and ``sqrt(R^T K^-1 R)`` returned.
    """
    V, K = gs_operator(reference_mesh)
    psi_fine = eq.psi.at_points(reference_mesh.vertices)
    b = assemble_linear_form(V, lambda p, *_: c / p[:, 0])
    R = K @ psi_fine - b
    free = ~reference_mesh.boundary_vertex_mask
    Kff = K[free][:, free]
    y = solve_spd(Kff, R[free], 1e-12)
    return float(np.sqrt(R[free] @ y))


# -- G-EQDSK --------------------------------------------------------------------

_FLOAT = re.compile(r"[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eEdD][+-]?\d+)?")


@dataclass
class GEqdsk:
    """Raw contents of a G-EQDSK file."""

    header: str
    idum: int
    nw: int
    nh: int
    rdim: float
    zdim: float
    rcentr: float
    rleft: float
    zmid: float
    rmaxis: float
    zmaxis: float
    simag: float
    sibry: float
    bcentr: float
    current: float
    fpol: np.ndarray
    pres: np.ndarray
    ffprim: np.ndarray
    pprime: np.ndarray
    psirz: np.ndarray  # (nh, nw), r index fastest
    qpsi: np.ndarray
    rbbbs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    zbbbs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rlim: np.ndarray = field(default_factory=lambda: np.zeros(0))
    zlim: np.ndarray = field(default_factory=lambda: np.zeros(0))


def parse_geqdsk(path) -> GEqdsk:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise EquilibriumError("empty G-EQDSK file")
    first = lines[0]
    ints = first[48:].split()
    if len(ints) < 3:
        raise EquilibriumError("malformed G-EQDSK header: expected idum, nw, nh")
    try:
        idum, nw, nh = (int(s) for s in ints[-3:])
    except ValueError:
        raise EquilibriumError("malformed G-EQDSK header integers") from None
    if nw < 2 or nh < 2:
        raise EquilibriumError("G-EQDSK grid needs nw, nh >= 2")

    tokens = []
    rest = lines[1:]
    need = 20 + 5 * nw + nw * nh
    k = 0
    while k < len(rest) and len(tokens) < need:
        tokens.extend(_FLOAT.findall(rest[k]))
        k += 1
    if len(tokens) < need:
        raise EquilibriumError(f"G-EQDSK data truncated: expected {need} values, got {len(tokens)}")
    vals = np.array([float(t.replace("D", "E").replace("d", "e")) for t in tokens[:need]])
    extra = tokens[need:]
    s = vals[:20]
    pos = 20
    arrays = []
    for n in (nw, nw, nw, nw, nw * nh, nw):
        arrays.append(vals[pos : pos + n])
        pos += n
    fpol, pres, ffprim, pprime, psi, qpsi = arrays

    bnd = np.zeros((0, 2))
    lim = np.zeros((0, 2))
    tail_lines = rest[k:]
    tail = [t for ln in tail_lines for t in ln.split()]
    tail = extra + tail
    if len(tail) >= 2:
        try:
            nbbbs, limitr = int(tail[0]), int(tail[1])
        except ValueError:
            raise EquilibriumError("malformed boundary/limiter counts") from None
        nums = [float(t) for t in _FLOAT.findall(" ".join(tail[2:]))]
        if len(nums) < 2 * (nbbbs + limitr):
            raise EquilibriumError("boundary/limiter section truncated")
        bnd = np.array(nums[: 2 * nbbbs]).reshape(-1, 2)
        lim = np.array(nums[2 * nbbbs : 2 * (nbbbs + limitr)]).reshape(-1, 2)

    return GEqdsk(
        header=first[:48], idum=idum, nw=nw, nh=nh,
        rdim=s[0], zdim=s[1], rcentr=s[2], rleft=s[3], zmid=s[4],
        rmaxis=s[5], zmaxis=s[6], simag=s[7], sibry=s[8], bcentr=s[9],
        current=s[10],
        fpol=fpol, pres=pres, ffprim=ffprim, pprime=pprime,
        psirz=psi.reshape(nh, nw), qpsi=qpsi,
        rbbbs=bnd[:, 0], zbbbs=bnd[:, 1], rlim=lim[:, 0], zlim=lim[:, 1],
    )


def _fmt_block(values):
    out = []
    values = list(values)
    for i in range(0, len(values), 5):
        out.append("".join(f"{v:16.9e}" for v in values[i : i + 5]))
    return out


def write_geqdsk(g: GEqdsk, path):
    """Write a G-EQDSK file using the standard ``5e16.9`` layout."""
    lines = [f"{g.header[:48]:<48s}{g.idum:4d}{g.nw:4d}{g.nh:4d}"]
    scalars = [
        g.rdim, g.zdim, g.rcentr, g.rleft, g.zmid,
        g.rmaxis, g.zmaxis, g.simag, g.sibry, g.bcentr,
        g.current, g.simag, 0.0, g.rmaxis, 0.0,
        g.zmaxis, 0.0, g.sibry, 0.0, 0.0,
    ]
    for i in range(0, 20, 5):
        lines.extend(_fmt_block(scalars[i : i + 5]))
    for arr in (g.fpol, g.pres, g.ffprim, g.pprime, np.ravel(g.psirz), g.qpsi):
        lines.extend(_fmt_block(arr))
    lines.append(f"{len(g.rbbbs):5d}{len(g.rlim):5d}")
    bnd = np.column_stack([g.rbbbs, g.zbbbs]).ravel()
    lim = np.column_stack([g.rlim, g.zlim]).ravel()
    if bnd.size:
        lines.extend(_fmt_block(bnd))
    if lim.size:
        lines.extend(_fmt_block(lim))
    Path(path).write_text("\n".join(lines) + "\n")


def read_geqdsk(path, triangulate=True) -> EquilibriumInput:
    """Load a G-EQDSK file as an equilibrium on a triangulated grid mesh."""
    if not triangulate:
        raise EquilibriumError("only the triangulated grid representation is supported")
    g = parse_geqdsk(path)
    if g.rleft <= 0:
        raise EquilibriumError("grid touches the symmetry axis (rleft <= 0)")
    zlo = g.zmid - 0.5 * g.zdim
    mesh = build_structured_mesh(g.rleft, g.rleft + g.rdim, zlo, zlo + g.zdim, g.nw - 1, g.nh - 1)
    V = FunctionSpace(mesh, "CG1")
    psi = Field(V, g.psirz.ravel())

    meta = {"source": "geqdsk", "path": str(path), "header": g.header.strip(),
            "boundary": np.column_stack([g.rbbbs, g.zbbbs]),
            "limiter": np.column_stack([g.rlim, g.zlim]), "flux_descending": False}
    if g.simag == g.sibry:
        raise EquilibriumError("simag equals sibry: flux normalisation undefined")
    grid = np.linspace(g.simag, g.sibry, g.nw)
    fpol = np.asarray(g.fpol)
    if grid[0] > grid[-1]:
        # descending flux labels: np.interp needs ascending samples
        grid, fpol = grid[::-1], fpol[::-1]
        meta["flux_descending"] = True
    profile = Profile1D(grid, fpol)
    f = Field(V, profile(psi.coeffs))
    return EquilibriumInput(mesh, psi, f, float(g.sibry), profile, meta)
