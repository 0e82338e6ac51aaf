"""Region masks, r-weighted norms, path comparison and CSV reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import cell_quadrature

CSV_HEADER = ("field", "mask", "norm", "path", "rweight", "mesh_id")


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class RegionMask:
    """Cell selection for norms.

    mode
        ``all``, ``tag`` (cells with ``region == tag``), ``plasma`` (the
        plasma tag on multi-region meshes, otherwise the flux band [0, 1]) or
        ``band`` (normalised flux between ``lo`` and ``hi``, where 0 is the
        separatrix and 1 the magnetic axis).
    """

    mode: str = "all"
    tag: int | None = None
    lo: float = 0.0
    hi: float = 1.0

    @classmethod
    def parse(cls, spec: str):
        """Parse ``all``, ``plasma``, ``tag:<int>``, ``band:<lo>:<hi>`` or ``separatrix``."""
        s = spec.strip().lower()
        if s in ("all", "plasma"):
            return cls(s)
        if s == "separatrix":
            return SEPARATRIX_BAND
        head, _, rest = s.partition(":")
        try:
            if head == "tag":
                return cls("tag", tag=int(rest))
            if head == "band":
                lo, hi = (float(v) for v in rest.split(":"))
                return cls("band", lo=lo, hi=hi)
        except ValueError:
            pass
        raise DiagnosticsError(f"cannot parse mask {spec!r}")

    @property
    def label(self):
        if self.mode == "tag":
            return f"tag:{self.tag}"
        if self.mode == "band":
            return f"band:{self.lo:g}:{self.hi:g}"
        return self.mode

    def cells(self, mesh, psi=None, psi_sep=None, psi_axis=None, plasma_tag=1):
        """Boolean cell selection; raises if it is empty."""
        if self.mode == "all":
            sel = np.ones(mesh.n_cells, dtype=bool)
        elif self.mode == "tag":
            sel = mesh.region == self.tag
        elif self.mode == "plasma" and len(np.unique(mesh.region)) > 1:
            sel = mesh.region == plasma_tag
        elif self.mode in ("plasma", "band"):
            if psi is None or psi_sep is None or psi_axis is None:
                raise DiagnosticsError(f"mask {self.label!r} needs psi, psi_sep and psi_axis")
            if psi_axis == psi_sep:
                raise DiagnosticsError("psi_axis equals psi_sep: flux band undefined")
            lo, hi = (0.0, 1.0) if self.mode == "plasma" else (self.lo, self.hi)
            c = mesh.centroids
            vals = psi.at_points(c) if hasattr(psi, "at_points") else np.asarray(psi(c))
            frac = (vals - psi_sep) / (psi_axis - psi_sep)
            sel = (frac >= lo) & (frac <= hi)
        else:
            raise DiagnosticsError(f"unknown mask mode {self.mode!r}")
        if not sel.any():
            raise DiagnosticsError(f"mask {self.label!r} selects no cells")
        return sel


ALL = RegionMask("all")
PLASMA = RegionMask("plasma")
#: outer 5% of the flux range next to the separatrix
SEPARATRIX_BAND = RegionMask("band", lo=0.0, hi=0.05)


def _squared(v):
    return (v**2).sum(axis=1) if v.ndim == 2 else v**2


def weighted_norm(fld, cells=None):
    """``sqrt(int_mask r |field|^2 dA)`` with degree-4 quadrature.

    ``cells`` is a boolean cell mask (default: every cell).
    """
    mesh = fld.mesh
    cq = cell_quadrature(mesh)
    w = cq.weights * cq.points[:, 0]
    if cells is not None:
        cells = np.asarray(cells, dtype=bool)
        if not cells.any():
            raise DiagnosticsError("empty mask")
        w = w * cells[cq.cells]
    v = fld.evaluate(cq.cells, cq.bary)
    return float(np.sqrt(np.sum(w * _squared(v))))


def compare_fields(a, b_ref, cells=None):
    """r-weighted L2 norm of ``a - b_ref`` evaluated pointwise.

    The fields may live in different spaces but must share a mesh.
    """
    if not a.mesh.same_as(b_ref.mesh):
        raise DiagnosticsError("fields live on different meshes")
    mesh = a.mesh
    cq = cell_quadrature(mesh)
    w = cq.weights * cq.points[:, 0]
    if cells is not None:
        cells = np.asarray(cells, dtype=bool)
        if not cells.any():
            raise DiagnosticsError("empty mask")
        w = w * cells[cq.cells]
    d = a.evaluate(cq.cells, cq.bary) - b_ref.evaluate(cq.cells, cq.bary)
    return float(np.sqrt(np.sum(w * _squared(d))))


@dataclass
class NormEntry:
    field: str
    mask: str
    norm: float
    path: str
    rweight: str
    mesh_id: str


@dataclass
class DiagnosticsReport:
    entries: list = field(default_factory=list)
    mesh_stats: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, entry: NormEntry):
        if not (np.isfinite(entry.norm) and entry.norm >= 0):
            raise DiagnosticsError(f"invalid norm {entry.norm!r} for {entry.field}")
        self.entries.append(entry)

    def norm(self, field, mask, path, rweight="multiply", mesh_id=None):
        for e in self.entries:
            if (e.field, e.mask, e.path, e.rweight) == (field, mask, path, rweight) and (
                    mesh_id is None or e.mesh_id == mesh_id):
                return e.norm
        raise KeyError((field, mask, path, rweight, mesh_id))

    def ratios(self, numerator_path, denominator_path, mask="plasma", rweight="multiply"):
        """Per-field ``norm(num) / norm(den)``; fields with a zero denominator are skipped."""
        out = {}
        for e in self.entries:
            if e.path != numerator_path or e.mask != mask or e.rweight != rweight:
                continue
            try:
                den = self.norm(e.field, mask, denominator_path, rweight, e.mesh_id)
            except KeyError:
                continue
            if den > 0:
                out[e.field] = e.norm / den
        return out


def mesh_statistics(mesh, refinement_level=0):
    return {
        "cells": mesh.n_cells,
        "vertices": mesh.n_vertices,
        "r_min": float(mesh.vertices[:, 0].min()),
        "r_max": float(mesh.vertices[:, 0].max()),
        "refinement_level": refinement_level,
    }


def report_transfer(result, masks, mesh_id, report=None, psi=None, psi_sep=None, psi_axis=None):
    """Append the norm of every result field over every mask to a report."""
    report = report if report is not None else DiagnosticsReport()
    cfg = result.config
    for mask in masks:
        sel = mask.cells(result.Bp.mesh, psi, psi_sep, psi_axis)
        for name, fld in result.fields().items():
            report.add(NormEntry(name, mask.label, weighted_norm(fld, sel), cfg.path,
                                 cfg.rweight, mesh_id))
    return report


def export_report(report: DiagnosticsReport, path):
    """Write the report as CSV; floats use ``repr`` so values round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for e in report.entries:
            w.writerow([e.field, e.mask, repr(float(e.norm)), e.path, e.rweight, e.mesh_id])
    return path


def read_report(path):
    rep = DiagnosticsReport()
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise DiagnosticsError("not a diagnostics report")
    for row in rows[1:]:
        rep.add(NormEntry(row[0], row[1], float(row[2]), row[3], row[4], row[5]))
    return rep
