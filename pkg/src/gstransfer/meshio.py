"""Gmsh MSH 2.2 (ASCII) reading/writing and VTK XML unstructured-grid output."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import quoteattr

import numpy as np

from .mesh import DEFAULT_BOUNDARY_MARK, DEFAULT_REGION, Mesh2D, MeshError

# gmsh element type -> number of nodes, for the types we accept
_LINE, _TRI, _POINT = 1, 2, 15
_NODES = {_LINE: 2, _TRI: 3, _POINT: 1}


class MeshFormatError(MeshError):
    pass


def _sections(lines):
    out = {}
    i = 0
    while i < len(lines):
        ln = lines[i].strip()
        if ln.startswith("$") and not ln.startswith("$End"):
            name = ln[1:]
            j = i + 1
            while j < len(lines) and lines[j].strip() != f"$End{name}":
                j += 1
            if j == len(lines):
                raise MeshFormatError(f"section ${name} is not terminated")
            out[name] = lines[i + 1 : j]
            i = j
        i += 1
    return out


def read_gmsh(path) -> Mesh2D:
    """Read a 2D triangular mesh from a Gmsh MSH 2.2 ASCII file.

    Triangles' physical tags become region tags and line elements' physical
    tags become boundary marks.  Point elements are ignored; any other element
    type is rejected.
    """
    lines = Path(path).read_text().splitlines()
    sec = _sections(lines)
    for required in ("MeshFormat", "Nodes", "Elements"):
        if required not in sec:
            raise MeshFormatError(f"missing ${required} section")
    fmt = sec["MeshFormat"][0].split()
    if len(fmt) < 3 or not fmt[0].startswith("2"):
        raise MeshFormatError(f"unsupported MSH version {fmt[:1]}")
    if fmt[1] != "0":
        raise MeshFormatError("binary MSH files are not supported")

    try:
        nn = int(sec["Nodes"][0])
        node_rows = [ln.split() for ln in sec["Nodes"][1 : 1 + nn]]
        ids = np.array([int(r[0]) for r in node_rows])
        xyz = np.array([[float(v) for v in r[1:4]] for r in node_rows])
    except (ValueError, IndexError):
        raise MeshFormatError("malformed $Nodes section") from None
    if len(node_rows) != nn or xyz.shape != (nn, 3):
        raise MeshFormatError("malformed $Nodes section")
    if np.any(xyz[:, 2] != 0.0):
        raise MeshFormatError("mesh is not planar (non-zero z coordinates)")
    index = {int(g): k for k, g in enumerate(ids)}

    tris, regions, lines_, marks = [], [], [], []
    try:
        ne = int(sec["Elements"][0])
        rows = [ln.split() for ln in sec["Elements"][1 : 1 + ne]]
        if len(rows) != ne:
            raise MeshFormatError("element count mismatch")
        for r in rows:
            etype, ntags = int(r[1]), int(r[2])
            tags = [int(t) for t in r[3 : 3 + ntags]]
            nodes = [index[int(v)] for v in r[3 + ntags :]]
            if etype not in _NODES:
                raise MeshFormatError(f"unsupported element type {etype}")
            if len(nodes) != _NODES[etype]:
                raise MeshFormatError(f"element {r[0]} has {len(nodes)} nodes")
            phys = tags[0] if tags else None
            if etype == _TRI:
                tris.append(nodes)
                regions.append(DEFAULT_REGION if phys is None else phys)
            elif etype == _LINE:
                lines_.append(nodes)
                marks.append(DEFAULT_BOUNDARY_MARK if phys is None else phys)
    except MeshFormatError:
        raise
    except (ValueError, IndexError, KeyError):
        raise MeshFormatError("malformed $Elements section") from None
    if not tris:
        raise MeshFormatError("no triangle elements")

    used = np.unique(np.array(tris))
    remap = -np.ones(nn, dtype=np.int64)
    remap[used] = np.arange(len(used))
    cells = remap[np.array(tris)]
    bmarks = {}
    for (a, b), mk in zip(lines_, marks):
        if remap[a] >= 0 and remap[b] >= 0:
            bmarks[(int(remap[a]), int(remap[b]))] = mk
    return Mesh2D(xyz[used, :2], cells, regions, bmarks, reorient=True)


def write_gmsh(mesh: Mesh2D, path):
    """Write ``mesh`` as MSH 2.2 ASCII with boundary lines and region tags."""
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    for k, (r, z) in enumerate(mesh.vertices, start=1):
        out.append(f"{k} {float(r)!r} {float(z)!r} 0")
    out.append("$EndNodes")
    nb = len(mesh.boundary_edges)
    out += ["$Elements", str(nb + mesh.n_cells)]
    eid = 1
    for e, mk in zip(mesh.boundary_edges, mesh.boundary_marks):
        a, b = mesh.edges[e] + 1
        out.append(f"{eid} {_LINE} 2 {mk} {mk} {a} {b}")
        eid += 1
    for c, tag in zip(mesh.cells + 1, mesh.region):
        out.append(f"{eid} {_TRI} 2 {tag} {tag} {c[0]} {c[1]} {c[2]}")
        eid += 1
    out.append("$EndElements")
    Path(path).write_text("\n".join(out) + "\n")


# -- VTU ----------------------------------------------------------------------------


def _data_array(name, values, ncomp):
    flat = " ".join(repr(float(v)) for v in np.ravel(values))
    return (f'<DataArray type="Float64" Name={quoteattr(name)} NumberOfComponents="{ncomp}" '
            f'format="ascii">{flat}</DataArray>')


def write_vtu(mesh: Mesh2D, fields: dict, path):
    """Write a VTK XML unstructured grid with one data array per field.

    CG1 fields become point data, DG0 fields cell data and vector fields
    (RT1, N1, VCG1) 3-component cell data holding the cell-average vector.
    Region tags are always written as cell data.
    """
    point_arrays, cell_arrays = [], []
    for name, fld in fields.items():
        if not fld.mesh.same_as(mesh):
            raise ValueError(f"field {name!r} lives on a different mesh")
        kind = fld.kind.value
        if kind == "CG1":
            point_arrays.append(_data_array(name, fld.coeffs, 1))
        elif kind == "DG0":
            cell_arrays.append(_data_array(name, fld.coeffs, 1))
        else:
            avg = fld.cell_average()
            vec = np.column_stack([avg, np.zeros(len(avg))])
            cell_arrays.append(_data_array(name, vec, 3))
    region = " ".join(str(int(t)) for t in mesh.region)
    cell_arrays.append(f'<DataArray type="Int32" Name="region" format="ascii">{region}</DataArray>')

    pts = np.column_stack([mesh.vertices, np.zeros(mesh.n_vertices)])
    conn = " ".join(str(int(v)) for v in mesh.cells.ravel())
    offsets = " ".join(str(3 * (k + 1)) for k in range(mesh.n_cells))
    types = " ".join(["5"] * mesh.n_cells)  # VTK_TRIANGLE
    xml = [
        '<?xml version="1.0"?>',
        '<VTKFile type="UnstructuredGrid" version="0.1" byte_order="LittleEndian">',
        "<UnstructuredGrid>",
        f'<Piece NumberOfPoints="{mesh.n_vertices}" NumberOfCells="{mesh.n_cells}">',
        "<PointData>", *point_arrays, "</PointData>",
        "<CellData>", *cell_arrays, "</CellData>",
        "<Points>", _data_array("Points", pts, 3), "</Points>",
        "<Cells>",
        f'<DataArray type="Int64" Name="connectivity" format="ascii">{conn}</DataArray>',
        f'<DataArray type="Int64" Name="offsets" format="ascii">{offsets}</DataArray>',
        f'<DataArray type="UInt8" Name="types" format="ascii">{types}</DataArray>',
        "</Cells>",
        "</Piece>",
        "</UnstructuredGrid>",
        "</VTKFile>",
    ]
    Path(path).write_text("\n".join(xml) + "\n")
