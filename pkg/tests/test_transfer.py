import numpy as np
import pytest

from gstransfer import fixtures
from gstransfer.assembly import assemble_linear_form, assemble_weighted_mass
from gstransfer.diagnostics import PLASMA, weighted_norm
from gstransfer.equilibria import EquilibriumInput, manufactured_vacuum
from gstransfer.mesh import Mesh2D, build_structured_mesh, perturb_mesh, refine_along_levelset
from gstransfer.spaces import Field, FunctionSpace
from gstransfer.transfer import (
    PATH_SPACES,
    TransferConfig,
    TransferError,
    compute_Bp,
    compute_Bt,
    compute_divergence,
    compute_J_direct,
    compute_Jp,
    compute_Jt,
    compute_lorentz,
    run_transfer,
)

PATHS = ("A", "B", "C")
RWEIGHTS = ("multiply", "divide")
TRI = Mesh2D([[1, 0], [2, 0], [1, 1]], [[0, 1, 2]])
LEDGER = "wall boundary layer from the CG1 interpolant; see decisions ledger"


def const(v):
    return lambda p: np.tile(np.asarray(v, float), (len(p), 1))


def order(ns, vals):
    return np.polyfit(np.log(1.0 / np.asarray(ns)), np.log(vals), 1)[0]


def plasma(eq, mesh):
    return PLASMA.cells(mesh, eq.psi, eq.psi_sep, eq.psi_axis)


def inner(mesh, d=0.2):
    c = mesh.centroids
    return (c[:, 0] > 1 + d) & (c[:, 0] < 2 - d) & (c[:, 1] > d) & (c[:, 1] < 1 - d)


def zero_field(mesh, kind):
    V = FunctionSpace(mesh, kind)
    return Field(V, np.zeros(V.ndofs))


# -- configuration -----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(path="D"), dict(rweight="both"), dict(source_eval="x"),
                                dict(solver_tol=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TransferConfig(**kw)


def test_aligned_requires_same_mesh():
    eq = fixtures.vacuum(8)
    with pytest.raises(TransferError):
        run_transfer(TransferConfig("A"), eq, fixtures.structured(4))


def test_cross_outside_fraction_aborts():
    eq = fixtures.vacuum(8)
    shifted = build_structured_mesh(1.5, 2.5, 0, 1, 8, 8)
    with pytest.raises(TransferError, match="outside"):
        run_transfer(TransferConfig("A", source_eval="cross"), eq, shifted)


@pytest.mark.parametrize("path", PATHS)
@pytest.mark.parametrize("rweight", RWEIGHTS)
def test_space_table(path, rweight):
    res = run_transfer(TransferConfig(path, rweight), fixtures.vacuum(4), fixtures.structured(4))
    assert res.check_spaces()
    assert {k: f.kind.value for k, f in res.fields().items()} == PATH_SPACES[path]


def test_kind_mismatch_rejected():
    m = fixtures.structured(4)
    with pytest.raises(ValueError):
        compute_Jt(TransferConfig("A"), zero_field(m, "N1"))
    with pytest.raises(ValueError):
        compute_Jp(TransferConfig("B"), zero_field(m, "DG0"))
    with pytest.raises(ValueError):
        compute_lorentz(TransferConfig("A"), zero_field(m, "RT1"), zero_field(m, "DG0"))


# -- Bp ----------------------------------------------------------------------------


QUAD_1R = pytest.mark.xfail(strict=True, reason="divergence-theorem cancellation with 1/r, 1/r^2 "
                            "integrands is limited by the degree-4 rule; see decisions ledger")
ROUNDOFF = pytest.mark.xfail(strict=True, reason="curl of a roundoff-level N1 field reaches 1e-11; "
                             "see decisions ledger")
CASES = [(p, w) for p in PATHS for w in RWEIGHTS if p != "B"] + [
    ("B", "multiply"), pytest.param("B", "divide", marks=QUAD_1R)]


@pytest.mark.parametrize("path,rweight", CASES)
def test_bp_of_constant_flux_is_zero(path, rweight):
    eq = manufactured_vacuum(fixtures.unstructured(), 0, 3.5, 0, 1)
    bp = compute_Bp(TransferConfig(path, rweight), eq, eq.mesh)
    assert np.abs(bp.coeffs).max() <= 1e-11


def test_bp_path_a_matches_dense_solve():
    eq = fixtures.vacuum(8)
    bp = compute_Bp(TransferConfig("A"), eq, eq.mesh)
    V = bp.space
    M = assemble_weighted_mass(V, "r").toarray()
    rhs = assemble_linear_form(V, lambda x, c, b: eq.psi.evaluate(c, b, "perp_grad"))
    dense = np.linalg.solve(M, rhs)
    assert np.abs(dense - bp.coeffs).max() <= 1e-10
    assert np.linalg.norm(M @ bp.coeffs - rhs) / np.linalg.norm(rhs) <= 1e-12


@pytest.mark.xfail(strict=True, reason="perp_grad of the CG1 interpolant of r^2 is not 2r e_z; "
                                       + LEDGER)
def test_bp_path_a_vacuum_is_rt1_constant():
    eq = fixtures.vacuum(8)
    bp = compute_Bp(TransferConfig("A"), eq, eq.mesh)
    ref = FunctionSpace(eq.mesh, "RT1").interpolate(const([0, 2]))
    assert np.abs(bp.coeffs - ref.coeffs).max() <= 1e-12


# -- Bt ----------------------------------------------------------------------------


@pytest.mark.parametrize("path", PATHS)
def test_bt_zero(path):
    eq = manufactured_vacuum(fixtures.structured(4), 1, 0, 0, 0)
    assert not compute_Bt(TransferConfig(path), eq, eq.mesh).coeffs.any()


@pytest.mark.parametrize("rweight", RWEIGHTS)
def test_bt_dg0_single_triangle(rweight):
    eq = manufactured_vacuum(TRI, 0, 1, 0, 2)
    bt = compute_Bt(TransferConfig("A", rweight), eq, TRI)
    # multiply: int f / int r; divide: int (f/r) / |T|; both approximate 2/r
    if rweight == "multiply":
        assert bt.coeffs == pytest.approx([1.5], abs=1e-14)
    else:
        # int_T 2/r dA over {(1,0),(2,0),(1,1)} = 2 (2 ln 2 - 1); divided by |T| = 1/2
        assert bt.coeffs[0] == pytest.approx(4 * (2 * np.log(2) - 1), rel=1e-4)


def test_bt_cg1_converges_second_order():
    ns = (8, 16, 32, 64)
    errs = []
    for n in ns:
        m = fixtures.structured(n)
        bt = compute_Bt(TransferConfig("B"), manufactured_vacuum(m, 0, 1, 0, 2), m)
        errs.append(np.abs(bt.coeffs - 2 / m.vertices[:, 0]).max())
    assert np.all(np.diff(errs) < 0) and order(ns, errs) >= 1.9


# -- J -----------------------------------------------------------------------------


@pytest.mark.parametrize("path", PATHS)
def test_jp_of_zero(path):
    cfg = TransferConfig(path)
    m = fixtures.structured(4)
    jp = compute_Jp(cfg, zero_field(m, cfg.space("Bt")))
    assert not jp.coeffs.any()
    jt = compute_Jt(cfg, zero_field(m, cfg.space("Bp")))
    assert not jt.coeffs.any()


@pytest.mark.parametrize("rweight", RWEIGHTS)
def test_jp_path_b_constant_bt_dense_oracle(rweight):
    m = fixtures.structured(8)
    kappa = 1.7
    bt = Field(FunctionSpace(m, "CG1"), np.full(m.n_vertices, kappa))
    jp = compute_Jp(TransferConfig("B", rweight), bt)
    V = jp.space
    if rweight == "multiply":
        M = assemble_weighted_mass(V, "r").toarray()
        rhs = assemble_linear_form(V, lambda x, c, b: np.tile([0, kappa], (len(x), 1)))
    else:
        M = assemble_weighted_mass(V, "1").toarray()
        rhs = assemble_linear_form(V, lambda x, c, b: np.outer(kappa / x[:, 0], [0, 1]))
    assert np.abs(np.linalg.solve(M, rhs) - jp.coeffs).max() <= 1e-10


def test_jp_path_a_vacuum_vanishes():
    # the refinement-order example degenerates: Jp is already at roundoff
    for n in (8, 16, 32):
        eq = fixtures.vacuum(n)
        res = run_transfer(TransferConfig("A"), eq, eq.mesh)
        assert weighted_norm(res.Jp) <= 1e-12


@pytest.mark.parametrize("rweight", RWEIGHTS)
@pytest.mark.parametrize("mesh", [lambda: fixtures.structured(8), fixtures.unstructured,
                                  lambda: perturb_mesh(fixtures.structured(8), 0.05)])
def test_jt_path_a_of_rt1_constant_vanishes(rweight, mesh):
    m = mesh()
    bp = FunctionSpace(m, "RT1").interpolate(const([0, 2]))
    jt = compute_Jt(TransferConfig("A", rweight), bp)
    assert np.abs(jt.coeffs).max() <= 1e-10


@pytest.mark.parametrize("rweight", RWEIGHTS)
def test_jt_path_b_cellwise_curl(rweight):
    m = perturb_mesh(fixtures.structured(8), 0.05)
    bp = FunctionSpace(m, "N1").interpolate(lambda p: np.column_stack([0 * p[:, 0], p[:, 0]]))
    jt = compute_Jt(TransferConfig("B", rweight), bp)
    oracle = -bp.evaluate(np.arange(m.n_cells), np.full((m.n_cells, 3), 1 / 3), "curl")
    assert np.abs(jt.coeffs - oracle).max() <= 1e-10
    assert np.abs(jt.coeffs + 1).max() <= 1e-10


def test_j_direct_trivial_cases():
    m = fixtures.structured(8)
    eq = manufactured_vacuum(m, 1, 0, 0, 3)
    jp, _ = compute_J_direct(eq, m)
    assert np.abs(jp.coeffs).max() == 0
    eq = manufactured_vacuum(m, 0, 2, 0, 3)
    _, jt = compute_J_direct(eq, m)
    assert np.abs(jt.coeffs).max() == 0


@pytest.mark.xfail(strict=True, reason="order is about 0.5 over the whole domain; " + LEDGER)
def test_j_direct_vacuum_order():
    ns = (8, 16, 32, 64)
    vals = []
    for n in ns:
        eq = fixtures.vacuum(n)
        vals.append(weighted_norm(compute_J_direct(eq, eq.mesh)[1]))
    assert order(ns, vals) >= 1.0


def test_j_direct_vacuum_interior_converges():
    ns = (8, 16, 32, 64)
    vals = []
    for n in ns:
        eq = fixtures.vacuum(n)
        vals.append(weighted_norm(compute_J_direct(eq, eq.mesh)[1], inner(eq.mesh)))
    assert np.all(np.diff(vals) < 0) and order(ns, vals) >= 1.0


def test_path_a_jt_close_to_direct():
    eq = fixtures.linear_gs(32)
    sel = plasma(eq, eq.mesh)
    res = run_transfer(TransferConfig("A"), eq, eq.mesh)
    _, jt = compute_J_direct(eq, eq.mesh)
    diff = weighted_norm(Field(jt.space, res.Jt.coeffs - jt.coeffs), sel)
    assert diff / weighted_norm(jt, sel) <= 0.1


# -- divergence --------------------------------------------------------------------


@pytest.mark.parametrize("path", PATHS)
def test_divergence_of_zero(path):
    cfg = TransferConfig(path)
    m = fixtures.structured(4)
    eq = manufactured_vacuum(m, 0, 1, 0, 1)
    db = compute_divergence(cfg, zero_field(m, cfg.space("Bp")), eq)
    assert np.abs(db.coeffs).max() == 0


def test_path_b_needs_source():
    with pytest.raises(ValueError):
        compute_divergence(TransferConfig("B"), zero_field(fixtures.structured(2), "N1"))


def _rel_div(cfg, eq, target):
    res = run_transfer(cfg, eq, target)
    return weighted_norm(res.Db) / weighted_norm(res.Bp)


@pytest.mark.parametrize("rweight", RWEIGHTS)
@pytest.mark.parametrize("case", ["aligned", "perturbed", "unstructured", "refined", "vacuum-c3"])
def test_path_b_weakly_divergence_free(rweight, case):
    eq = fixtures.linear_gs(16)
    target, mode = eq.mesh, "aligned"
    if case == "perturbed":
        target, mode = perturb_mesh(eq.mesh, 0.05), "cross"
    elif case == "unstructured":
        target, mode = fixtures.unstructured(), "cross"
    elif case == "refined":
        target, _ = refine_along_levelset(eq.mesh, eq.psi, 0.02, passes=2)
        mode = "cross"
    elif case == "vacuum-c3":
        eq = manufactured_vacuum(fixtures.unstructured(), 0.3, 0, 1, 1)
        target = eq.mesh
    assert _rel_div(TransferConfig("B", rweight, source_eval=mode), eq, target) <= 1e-8


def test_path_b_negative_control():
    # nonzero flux through the wall; the linear-GS input has psi = 0 there and g1 = 0
    eq = manufactured_vacuum(fixtures.unstructured(), 0.3, 0, 1, 1)
    cfg = TransferConfig("B")
    res = run_transfer(cfg, eq, eq.mesh)
    db = compute_divergence(cfg, res.Bp, eq, include_g1=False)
    assert weighted_norm(db) / weighted_norm(res.Bp) > 1e-3


@pytest.mark.parametrize("path", ["A", "C"])
def test_strong_divergence_not_preserved(path):
    eq = fixtures.linear_gs(16)
    assert _rel_div(TransferConfig(path), eq, eq.mesh) >= 1e-3


# -- Lorentz -----------------------------------------------------------------------


@pytest.mark.parametrize("path", ["A", "B"])
def test_lorentz_zero_current(path):
    cfg = TransferConfig(path)
    eq = fixtures.linear_gs(8)
    bp = compute_Bp(cfg, eq, eq.mesh)
    bt = compute_Bt(cfg, eq, eq.mesh)
    fp, ft = compute_lorentz(cfg, bp, bt, zero_field(eq.mesh, cfg.space("Jp")),
                             zero_field(eq.mesh, cfg.space("Jt")))
    assert not fp.coeffs.any() and not ft.coeffs.any()


def test_lorentz_path_c_zero_bp():
    m = fixtures.structured(8)
    bt = Field(FunctionSpace(m, "CG1"), 2.0 / m.vertices[:, 0])
    fp, ft = compute_lorentz(TransferConfig("C"), zero_field(m, "VCG1"), bt)
    assert not ft.coeffs.any()


def _vacuum_forces(ns, sel_fn):
    fp, ft = [], []
    for n in ns:
        eq = fixtures.vacuum(n)
        res = run_transfer(TransferConfig("A"), eq, eq.mesh)
        sel = sel_fn(eq)
        fp.append(weighted_norm(res.Fp, sel))
        ft.append(weighted_norm(res.Ft, sel))
    return np.array(fp), np.array(ft)


@pytest.mark.xfail(strict=True, reason="plasma-region Fp converges at order about 0.6; " + LEDGER)
def test_vacuum_force_order():
    ns = (8, 16, 32)
    fp, _ = _vacuum_forces(ns, lambda eq: plasma(eq, eq.mesh))
    assert order(ns, fp) >= 1.0


def test_vacuum_toroidal_force_vanishes():
    _, ft = _vacuum_forces((8, 16, 32), lambda eq: plasma(eq, eq.mesh))
    assert ft.max() <= 1e-12


def test_vacuum_force_interior_converges():
    ns = (8, 16, 32)
    fp, _ = _vacuum_forces(ns, lambda eq: inner(eq.mesh))
    assert np.all(np.diff(fp) < 0) and order(ns, fp) >= 1.0


# -- pipeline ----------------------------------------------------------------------


@pytest.mark.parametrize("path,rweight", CASES[:4] + [
    pytest.param("B", "multiply", marks=ROUNDOFF), pytest.param("B", "divide", marks=QUAD_1R)])
@pytest.mark.parametrize("mesh", [lambda: fixtures.structured(8), fixtures.unstructured])
def test_trivial_equilibrium(path, rweight, mesh):
    eq = manufactured_vacuum(mesh(), 0, 1, 0, 0)
    res = run_transfer(TransferConfig(path, rweight), eq, eq.mesh)
    for name, f in res.fields().items():
        assert np.abs(f.coeffs).max() <= 1e-12, name


def test_vacuum_divergence_path_b_32():
    eq = fixtures.vacuum(32)
    assert _rel_div(TransferConfig("B"), eq, eq.mesh) <= 1e-8


@pytest.mark.xfail(strict=True, reason="Jt peaks at about 2 in the wall corners; " + LEDGER)
def test_vacuum_jt_32():
    eq = fixtures.vacuum(32)
    res = run_transfer(TransferConfig("A"), eq, eq.mesh)
    assert np.abs(res.Jt.coeffs).max() <= 1e-8


@pytest.mark.parametrize("rweight", RWEIGHTS)
@pytest.mark.parametrize("n", [16, 32])
def test_poloidal_force_ranking(rweight, n):
    eq = fixtures.linear_gs(n)
    sel = plasma(eq, eq.mesh)
    fp = {p: weighted_norm(run_transfer(TransferConfig(p, rweight), eq, eq.mesh).Fp, sel)
          for p in PATHS}
    assert fp["A"] < fp["B"] and fp["A"] < fp["C"]


@pytest.mark.xfail(strict=True, reason="path C's nodal toroidal force is smaller than path A's "
                                       "DG0 force; see decisions ledger")
def test_toroidal_force_ranking():
    eq = fixtures.linear_gs(32)
    sel = plasma(eq, eq.mesh)
    ft = {p: weighted_norm(run_transfer(TransferConfig(p), eq, eq.mesh).Ft, sel) for p in PATHS}
    assert ft["A"] < ft["B"] and ft["A"] < ft["C"]


def test_cross_transfer_info():
    eq = fixtures.linear_gs(16)
    res = run_transfer(TransferConfig("A", source_eval="cross"), eq, perturb_mesh(eq.mesh, 0.05))
    assert 0 < res.info["outside_fraction"] < 0.1


def test_cross_on_identical_mesh_matches_aligned_for_path_b():
    eq = fixtures.linear_gs(8)
    a = run_transfer(TransferConfig("B"), eq, eq.mesh)
    c = run_transfer(TransferConfig("B", source_eval="cross"), eq, eq.mesh)
    assert np.abs(a.Bp.coeffs - c.Bp.coeffs).max() <= 1e-10


def test_equilibrium_input_is_not_mutated():
    eq = fixtures.linear_gs(8)
    before = eq.psi.coeffs.copy()
    run_transfer(TransferConfig("C"), eq, eq.mesh)
    assert np.array_equal(before, eq.psi.coeffs)
    assert isinstance(eq, EquilibriumInput)
