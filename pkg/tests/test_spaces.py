import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gstransfer import fixtures
from gstransfer.assembly import assemble_linear_form, cell_quadrature
from gstransfer.mesh import Mesh2D, PointLocation, build_structured_mesh, locate_point, perturb_mesh
from gstransfer.spaces import (
    Field,
    FunctionSpace,
    SpaceKind,
    build_space,
    eval_field,
    eval_strong_derivative,
    perp,
)

KINDS = ("CG1", "DG0", "RT1", "N1", "VCG1")
SQUARE = build_structured_mesh(1, 2, 0, 1, 1, 1)
TRI = Mesh2D([[1, 0], [2, 0], [1, 1]], [[0, 1, 2]])


def const(v):
    return lambda p: np.tile(np.asarray(v, float), (len(p), 1))


def meshes():
    return {"s8": fixtures.structured(8), "perturbed": perturb_mesh(fixtures.structured(8), 0.05),
            "unstructured": fixtures.unstructured()}


@pytest.mark.parametrize("kind,n", [("RT1", 5), ("N1", 5), ("CG1", 4), ("VCG1", 8), ("DG0", 2)])
def test_dof_counts(kind, n):
    assert build_space(SQUARE, kind).ndofs == n


def test_rank():
    assert [SpaceKind(k).rank for k in KINDS] == [0, 0, 1, 1, 1]  # tensor rank


def test_perp_rotates_counterclockwise():
    assert perp(np.array([[1.0, 0.0]])).tolist() == [[0.0, 1.0]]


def test_cg1_reproduces_r():
    m = fixtures.unstructured()
    f = Field(FunctionSpace(m, "CG1"), m.vertices[:, 0])
    for p in ([1.3, 0.7], [1.91, 0.05], [1.5, 0.5]):
        assert eval_field(f, locate_point(m, p)) == pytest.approx(p[0], abs=1e-13)


def test_rt1_constant_at_random_points():
    m = fixtures.structured(8)
    f = FunctionSpace(m, "RT1").interpolate(const([0, 2]))
    rng = np.random.default_rng(0)
    for p in rng.uniform([1, 0], [2, 1], size=(5, 2)):
        assert np.abs(eval_field(f, locate_point(m, p)) - [0, 2]).max() <= 1e-12


def test_dg0_is_cell_constant():
    m = fixtures.structured(4)
    f = Field(FunctionSpace(m, "DG0"), np.arange(m.n_cells, dtype=float))
    loc = locate_point(m, (1.3, 0.6))
    assert eval_field(f, loc) == loc.cell


def test_strong_derivative_of_r_squared():
    f = FunctionSpace(TRI, "CG1").interpolate(lambda p: p[:, 0] ** 2)
    assert f.coeffs.tolist() == [1.0, 4.0, 1.0]
    loc = locate_point(TRI, (1.2, 0.3))
    assert eval_strong_derivative(f, loc) == pytest.approx([3, 0])
    assert eval_strong_derivative(f, loc, "perp_grad") == pytest.approx([0, 3])


def test_rt1_constant_divergence_zero():
    f = FunctionSpace(fixtures.structured(4), "RT1").interpolate(const([0, 2]))
    assert abs(eval_strong_derivative(f, locate_point(f.mesh, (1.4, 0.4)))) <= 1e-12


def test_cg1_constant_gradient_zero():
    f = Field(FunctionSpace(SQUARE, "CG1"), np.full(4, 3.0))
    assert np.abs(eval_strong_derivative(f, locate_point(SQUARE, (1.5, 0.2)))).max() == 0


def test_dg0_derivative_rejected():
    f = Field(FunctionSpace(SQUARE, "DG0"), [1.0, 2.0])
    with pytest.raises(ValueError):
        eval_strong_derivative(f, locate_point(SQUARE, (1.5, 0.2)))


def test_field_validation():
    V = FunctionSpace(SQUARE, "CG1")
    with pytest.raises(ValueError):
        Field(V, [1.0, 2.0])
    with pytest.raises(ValueError):
        Field(V, [1.0, np.nan, 0, 0])
    f = Field(V, np.zeros(4))
    with pytest.raises(ValueError):
        f.coeffs[0] = 1.0


def test_eval_field_rejects_foreign_location():
    f = Field(FunctionSpace(SQUARE, "DG0"), [1.0, 2.0])
    loc = PointLocation(7, np.array([0.2, 0.3, 0.5]), "inside")
    with pytest.raises(ValueError):
        eval_field(f, loc)


@pytest.mark.parametrize("kind", ["RT1", "N1", "VCG1"])
def test_vector_spaces_reproduce_constants(kind):
    for m in meshes().values():
        f = FunctionSpace(m, kind).interpolate(const([0.3, -1.7]))
        cq = cell_quadrature(m)
        assert np.abs(f.evaluate(cq.cells, cq.bary) - [0.3, -1.7]).max() <= 1e-12


@pytest.mark.parametrize("name", ["s8", "perturbed", "unstructured"])
def test_de_rham_containment(name):
    m = meshes()[name]
    eta = Field(FunctionSpace(m, "CG1"), np.random.default_rng(4).standard_normal(m.n_vertices))
    cq = cell_quadrature(m)
    rt = FunctionSpace(m, "RT1").interpolate(lambda p: eta.at_points(p, "perp_grad"))
    nd = FunctionSpace(m, "N1").interpolate(lambda p: eta.at_points(p, "grad"))
    g = eta.evaluate(cq.cells, cq.bary, "grad")
    s = np.abs(g).max()
    assert np.abs(rt.evaluate(cq.cells, cq.bary) - perp(g)).max() / s <= 1e-12
    assert np.abs(nd.evaluate(cq.cells, cq.bary) - g).max() / s <= 1e-12
    # perp-div of a gradient vanishes against every DG0 test function
    curl = assemble_linear_form(FunctionSpace(m, "DG0"), lambda x, c, b: nd.evaluate(c, b, "curl"))
    assert np.abs(curl).max() / s <= 1e-12


def _midpoint_jumps(fld, tangential):
    m = fld.mesh
    inter = np.flatnonzero(m.edge_cells[:, 1] >= 0)
    t = m.vertices[m.edges[inter, 1]] - m.vertices[m.edges[inter, 0]]
    d = t if tangential else np.stack([t[:, 1], -t[:, 0]], axis=1)
    vals = []
    for side in (0, 1):
        c = m.edge_cells[inter, side]
        b = np.full((len(c), 3), 0.5)
        b[np.arange(len(c)), m.edge_local[inter, side]] = 0.0
        vals.append(np.einsum("nd,nd->n", fld.evaluate(c, b), d))
    return vals[0] - vals[1]


@pytest.mark.parametrize("kind", ["RT1", "N1"])
@given(seed=st.integers(0, 2**31))
def test_trace_continuity(kind, seed):
    for m in meshes().values():
        V = FunctionSpace(m, kind)
        f = Field(V, np.random.default_rng(seed).standard_normal(V.ndofs))
        assert np.abs(_midpoint_jumps(f, kind == "N1")).max() <= 1e-12 * np.abs(f.coeffs).max()


def test_rt1_dof_is_edge_flux():
    # unit coefficient on one edge: normal flux through that edge is 1 (global normal)
    m = fixtures.structured(2)
    V = FunctionSpace(m, "RT1")
    e = 5
    f = Field(V, np.eye(V.ndofs)[e])
    a, b = m.vertices[m.edges[e]]
    t = b - a
    n = np.array([t[1], -t[0]])
    c, loc = m.edge_cells[e, 0], m.edge_local[e, 0]
    s = np.array([0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6])
    flux = 0.0
    for si in s:
        bary = np.zeros(3)
        bary[(loc + 1) % 3], bary[(loc + 2) % 3] = 1 - si, si
        # orientation of the parametrisation does not matter for a normal flux
        flux += 0.5 * f.evaluate(np.array([c]), bary[None])[0] @ n
    assert abs(abs(flux) - 1.0) <= 1e-12


@given(arrays(float, 9, elements=st.floats(-5, 5)), st.floats(-3, 3))
def test_field_linear_ops(c, k):
    V = FunctionSpace(fixtures.structured(2), "CG1")
    a, b = Field(V, c), Field(V, c[::-1])
    assert np.allclose((a + b - b).coeffs, a.coeffs)
    assert np.allclose((k * a).coeffs, k * c)


def test_field_add_space_mismatch():
    a = Field(FunctionSpace(SQUARE, "CG1"), np.zeros(4))
    b = Field(FunctionSpace(SQUARE, "VCG1"), np.zeros(8))
    with pytest.raises(ValueError):
        a + b


@pytest.mark.parametrize("kind", KINDS)
def test_dof_map_deterministic(kind):
    a = FunctionSpace(build_structured_mesh(1, 2, 0, 1, 3, 3), kind)
    b = FunctionSpace(build_structured_mesh(1, 2, 0, 1, 3, 3), kind)
    assert np.array_equal(a.dofs, b.dofs) and np.array_equal(a.signs, b.signs)
