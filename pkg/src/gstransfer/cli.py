"""Command-line driver.

Exit codes: 0 on success, 1 for invalid input or options (and failed
acceptance checks), 2 for numerical failures (solver breakdown, transfer
outside the source mesh).

Settings can come from an INI-style config file (``--config``) with the
sections ``[mesh]``, ``[equilibrium]``, ``[transfer]`` and ``[diagnostics]``;
command-line flags override config values.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fixtures
from .assembly import SolverError
from .diagnostics import (
    ALL,
    DiagnosticsError,
    DiagnosticsReport,
    RegionMask,
    export_report,
    mesh_statistics,
    report_transfer,
)
from .equilibria import (
    EquilibriumError,
    EquilibriumInput,
    manufactured_vacuum,
    read_geqdsk,
    solve_linear_gs,
)
from .mesh import MeshError, build_structured_mesh, perturb_mesh, refine_along_levelset
from .meshio import read_gmsh, write_gmsh, write_vtu
from .transfer import TransferConfig, TransferError, run_transfer

log = logging.getLogger("gstransfer")

#: defaults for every config key, by section
DEFAULTS = {
    "mesh": {"rmin": 1.0, "rmax": 2.0, "zmin": 0.0, "zmax": 1.0, "nr": 8, "nz": 8,
             "alpha": 0.05, "passes": 2},
    "equilibrium": {"c1": 1.0, "c2": 0.0, "c3": 0.0, "f0": 2.0, "c": 1.0, "gs_f0": 10.0},
    "transfer": {"path": "A", "rweight": "multiply", "source_eval": "aligned", "tol": 1e-12,
                 "max_outside": 0.10},
    "diagnostics": {"mask": "all,plasma,separatrix", "paths": "A,B,C"},
}


class UsageError(Exception):
    """Invalid command line; reported with the usage text, exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class Settings:
    """Config-file values overridden by explicit flags."""

    def __init__(self, args):
        self.args = args
        self.cfg = configparser.ConfigParser()
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.is_file():
                raise UsageError(f"config file {path} not found")
            self.cfg.read(path)
            unknown = set(self.cfg.sections()) - set(DEFAULTS)
            if unknown:
                raise UsageError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    def is_default(self, section, key, dest=None):
        return getattr(self.args, dest or key, None) is None and not self.cfg.has_option(section, key)

    def get(self, section, key, dest=None):
        flag = getattr(self.args, dest or key, None)
        if flag is not None:
            return flag
        default = DEFAULTS[section][key]
        if self.cfg.has_option(section, key):
            raw = self.cfg.get(section, key)
            try:
                return type(default)(raw)
            except ValueError:
                raise UsageError(f"config [{section}] {key} = {raw!r} is not a "
                                 f"{type(default).__name__}") from None
        return default


# -- helpers ----------------------------------------------------------------------------


def _load_equilibrium(path):
    if path is None:
        return fixtures.vacuum(8)
    p = Path(path)
    if p.suffix == ".npz":
        return EquilibriumInput.load(p)
    return read_geqdsk(p)


def _mesh_from(args, s):
    if getattr(args, "mesh", None):
        return read_gmsh(args.mesh)
    return build_structured_mesh(s.get("mesh", "rmin"), s.get("mesh", "rmax"),
                                 s.get("mesh", "zmin"), s.get("mesh", "zmax"),
                                 s.get("mesh", "nr"), s.get("mesh", "nz"))


def _transfer_config(s):
    path = s.get("transfer", "path")
    rweight = s.get("transfer", "rweight")
    source_eval = s.get("transfer", "source_eval")
    for name, value, allowed in (("path", path, "ABC"), ("rweight", rweight, ("multiply", "divide")),
                                 ("source-eval", source_eval, ("aligned", "cross"))):
        if value not in allowed:
            raise UsageError(f"invalid --{name} {value!r}")
    return TransferConfig(path, rweight, s.get("transfer", "tol"), source_eval,
                          s.get("transfer", "max_outside"))


def _target(args, cfg, eq):
    if args.target is None:
        if cfg.source_eval == "cross":
            raise UsageError("--source-eval cross needs --target")
        return eq.mesh
    target = read_gmsh(args.target)
    if cfg.source_eval == "aligned" and not target.same_as(eq.mesh):
        raise UsageError("--target differs from the equilibrium mesh: use --source-eval cross")
    return target


def _masks(spec):
    return [RegionMask.parse(m) for m in spec.split(",") if m.strip()]


def _mesh_id(args, eq, target):
    if args.target:
        return Path(args.target).stem
    if args.equilibrium:
        return Path(args.equilibrium).stem
    return f"vacuum{target.n_cells}"


def _report(results, masks, mesh_id, eq, target):
    rep = DiagnosticsReport(mesh_stats=mesh_statistics(target))
    for res in results:
        report_transfer(res, masks, mesh_id, rep, eq.psi, eq.psi_sep, eq.psi_axis)
        rep.config[res.config.path] = vars(res.config).copy()
    return rep


def _usable_masks(s, eq, target):
    """Masks to report; default masks that select no cells are skipped.

    Flux masks on a foreign target sample the source psi at target centroids.
    An explicitly requested empty mask is an error.
    """
    masks = _masks(s.get("diagnostics", "mask"))
    if not s.is_default("diagnostics", "mask"):
        return masks
    kept = []
    for m in masks:
        try:
            m.cells(target, eq.psi, eq.psi_sep, eq.psi_axis)
            kept.append(m)
        except DiagnosticsError as exc:
            log.warning("default mask skipped: %s", exc)
    return kept or [ALL]


# -- subcommands ------------------------------------------------------------------------


def cmd_mesh(args, s):
    if args.action == "gen":
        mesh = _mesh_from(args, s)
    elif args.action == "read":
        mesh = read_gmsh(args.input)
    elif args.action == "perturb":
        mesh = perturb_mesh(read_gmsh(args.input), s.get("mesh", "alpha"))
    else:
        eq = _load_equilibrium(args.equilibrium)
        iso = eq.psi_sep if args.iso is None else args.iso
        mesh, _ = refine_along_levelset(eq.mesh, eq.psi, iso, passes=s.get("mesh", "passes"))
    if args.out:
        write_gmsh(mesh, args.out)
    level = s.get("mesh", "passes") if args.action == "refine" else 0
    print(json.dumps(mesh_statistics(mesh, level)))
    return 0


def cmd_equilibrium(args, s):
    if args.action == "import-geqdsk":
        eq = read_geqdsk(args.input)
    else:
        mesh = _mesh_from(args, s)
        if args.action == "vacuum":
            eq = manufactured_vacuum(mesh, *(s.get("equilibrium", k) for k in ("c1", "c2", "c3", "f0")))
        else:
            eq = solve_linear_gs(mesh, s.get("equilibrium", "c"), s.get("equilibrium", "gs_f0"),
                                 s.get("transfer", "tol"))
    eq.save(args.out)
    if args.mesh_out:
        write_gmsh(eq.mesh, args.mesh_out)
    print(json.dumps({"vertices": eq.mesh.n_vertices, "cells": eq.mesh.n_cells,
                      "psi_sep": eq.psi_sep, "psi_axis": eq.psi_axis}))
    return 0


def cmd_transfer(args, s):
    cfg = _transfer_config(s)
    eq = _load_equilibrium(args.equilibrium)
    target = _target(args, cfg, eq)
    masks = _usable_masks(s, eq, target)
    res = run_transfer(cfg, eq, target)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"transfer_{cfg.path}_{cfg.rweight}"
    write_vtu(target, res.fields(), out / f"{stem}.vtu")
    export_report(_report([res], masks, _mesh_id(args, eq, target), eq, target),
                  out / f"{stem}.csv")
    np.savez_compressed(out / f"{stem}.npz",
                        **{k: f.coeffs for k, f in res.fields().items()})
    print(f"wrote {out / stem}.{{vtu,csv,npz}}")
    return 0


def cmd_diagnose(args, s):
    eq = _load_equilibrium(args.equilibrium)
    base = _transfer_config(s)
    target = _target(args, base, eq)
    paths = [p.strip() for p in s.get("diagnostics", "paths").split(",") if p.strip()]
    bad = [p for p in paths if p not in "ABC" or len(p) != 1]
    if bad:
        raise UsageError(f"invalid path(s) {bad}")
    masks = _usable_masks(s, eq, target)
    results = []
    for p in paths:
        cfg = TransferConfig(p, base.rweight, base.solver_tol, base.source_eval,
                             base.max_outside_fraction)
        results.append(run_transfer(cfg, eq, target))
    rep = _report(results, masks, _mesh_id(args, eq, target), eq, target)
    export_report(rep, args.out)
    for num in paths[1:]:
        for m in masks:
            log.info("ratio %s/%s [%s]: %s", paths[0], num, m.label,
                     rep.ratios(paths[0], num, m.label, base.rweight))
    print(f"wrote {len(rep.entries)} norms to {args.out}")
    return 0


def cmd_suite(args, s):
    from .acceptance import run_all

    results = run_all()
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    return 0 if passed == len(results) else 1


# -- parser -----------------------------------------------------------------------------


def _add_mesh_flags(p):
    p.add_argument("--mesh", help="Gmsh file (default: structured mesh from [mesh])")
    for k in ("rmin", "rmax", "zmin", "zmax"):
        p.add_argument(f"--{k}", type=float)
    p.add_argument("--nr", type=int)
    p.add_argument("--nz", type=int)


def _add_transfer_flags(p, out_flag):
    p.add_argument("--path", choices=("A", "B", "C"))
    p.add_argument("--rweight", choices=("multiply", "divide"))
    p.add_argument("--source-eval", dest="source_eval", choices=("aligned", "cross"))
    p.add_argument("--tol", type=float)
    p.add_argument("--max-outside", dest="max_outside", type=float)
    p.add_argument("--equilibrium", help=".npz from `equilibrium` or a G-EQDSK file "
                                         "(default: 8x8 vacuum fixture)")
    p.add_argument("--target", help="target Gmsh mesh")
    p.add_argument("--mask", help="comma-separated masks: all, plasma, tag:N, band:lo:hi, separatrix")
    out_flag(p)


def build_parser():
    ap = _Parser(prog="gstransfer", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("mesh", help="generate, read, perturb or refine meshes")
    m.add_argument("action", choices=("gen", "read", "perturb", "refine"))
    m.add_argument("input", nargs="?", help="input Gmsh file for read/perturb")
    _add_mesh_flags(m)
    m.add_argument("--alpha", type=float)
    m.add_argument("--passes", type=int)
    m.add_argument("--equilibrium", help="equilibrium .npz whose psi drives refinement")
    m.add_argument("--iso", type=float, help="refinement level (default: psi_sep)")
    m.add_argument("--out")
    m.set_defaults(func=cmd_mesh)

    e = sub.add_parser("equilibrium", help="build or import an equilibrium")
    e.add_argument("action", choices=("vacuum", "linear-gs", "import-geqdsk"))
    e.add_argument("input", nargs="?", help="G-EQDSK file for import-geqdsk")
    _add_mesh_flags(e)
    for k in ("c1", "c2", "c3", "f0", "c"):
        e.add_argument(f"--{k}", type=float)
    e.add_argument("--gs-f0", dest="gs_f0", type=float)
    e.add_argument("--tol", type=float)
    e.add_argument("--out", required=True, help="output .npz")
    e.add_argument("--mesh-out", help="also write the mesh as Gmsh")
    e.set_defaults(func=cmd_equilibrium)

    t = sub.add_parser("transfer", help="run one projection path")
    _add_transfer_flags(t, lambda p: p.add_argument("--out-dir", default="."))
    t.set_defaults(func=cmd_transfer)

    d = sub.add_parser("diagnose", help="norm report over several paths")
    _add_transfer_flags(d, lambda p: p.add_argument("--out", required=True))
    d.add_argument("--paths", help="comma-separated paths (default A,B,C)")
    d.set_defaults(func=cmd_diagnose)

    su = sub.add_parser("suite", help="run the acceptance battery")
    su.add_argument("name", choices=("acceptance",))
    su.set_defaults(func=cmd_suite)
    return ap


def _check_action_inputs(args):
    if args.command == "mesh":
        if args.action in ("read", "perturb") and not args.input:
            raise UsageError(f"mesh {args.action} needs an input file")
        if args.action == "refine" and not args.equilibrium:
            raise UsageError("mesh refine needs --equilibrium")
    if args.command == "equilibrium" and args.action == "import-geqdsk" and not args.input:
        raise UsageError("equilibrium import-geqdsk needs an input file")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        _check_action_inputs(args)
        return args.func(args, Settings(args))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (SolverError, TransferError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, MeshError, EquilibriumError, DiagnosticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
