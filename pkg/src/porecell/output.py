"""Trajectory writers: node snapshots, element velocities, diagnostics and legacy VTK.

Every file starts with a header line ``# porecell <version> config_hash=<hash>``
(VTK files carry it as their title line).  Floats are written with 17
significant digits, so identical runs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import __version__
from .cell_problems import _atomic_write
from .macro_solver import DIAGNOSTIC_COLUMNS, MacroState, Trajectory


def header_line(config_hash: str) -> str:
    return f"# porecell {__version__} config_hash={config_hash}\n"


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _csv(columns, rows) -> str:
    return ",".join(columns) + "\n" + "".join(",".join(_fmt(v) for v in r) + "\n" for r in rows)


def snapshot_csv(state: MacroState, nodes, config_hash: str) -> str:
    cols = ("x", "y", "u0", "R0", "theta", "p0")
    data = np.column_stack([nodes, state.u0, state.R0, state.theta, state.p0])
    return header_line(config_hash) + f"# t={_fmt(state.time)}\n" + _csv(cols, data)


def velocity_csv(state: MacroState, centroids, config_hash: str) -> str:
    cols = ("cx", "cy", "vx", "vy")
    data = np.column_stack([centroids, state.vstar])
    return header_line(config_hash) + f"# t={_fmt(state.time)}\n" + _csv(cols, data)


def diagnostics_csv(traj: Trajectory, config_hash: str) -> str:
    return header_line(config_hash) + _csv(DIAGNOSTIC_COLUMNS, traj.diagnostics)


def snapshot_vtk(state: MacroState, mesh, config_hash: str) -> str:
    """Legacy ASCII unstructured grid with nodal fields and the element velocity."""
    nodes, elems = mesh.nodes, mesh.elements
    out = ["# vtk DataFile Version 3.0", header_line(config_hash)[2:].rstrip("\n") + f" t={_fmt(state.time)}", "ASCII"]
    out.append("DATASET UNSTRUCTURED_GRID")
    out.append(f"POINTS {len(nodes)} double")
    out += [f"{_fmt(x)} {_fmt(y)} 0" for x, y in nodes]
    out.append(f"CELLS {len(elems)} {4 * len(elems)}")
    out += [f"3 {a} {b} {c}" for a, b, c in elems]
    out.append(f"CELL_TYPES {len(elems)}")
    out += ["5"] * len(elems)
    out.append(f"POINT_DATA {len(nodes)}")
    for name in ("u0", "R0", "theta", "p0"):
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [_fmt(v) for v in getattr(state, name)]
    out.append(f"CELL_DATA {len(elems)}")
    out.append("VECTORS vstar double")
    out += [f"{_fmt(vx)} {_fmt(vy)} 0" for vx, vy in state.vstar]
    return "\n".join(out) + "\n"


def write_trajectory(traj: Trajectory, outdir, config_hash: str, formats=("csv",)) -> list:
    """Write all snapshots and the diagnostics; returns the written paths."""
    outdir = Path(outdir)
    mesh = traj.mesh
    P = mesh.nodes[mesh.elements]
    centroids = P.mean(axis=1)
    written = []

    def put(name, text):
        path = outdir / name
        _atomic_write(path, text)
        written.append(path)

    for k, state in enumerate(traj.snapshots):
        if "csv" in formats:
            put(f"snapshot_{k:04d}.csv", snapshot_csv(state, mesh.nodes, config_hash))
            put(f"velocity_{k:04d}.csv", velocity_csv(state, centroids, config_hash))
        if "vtk" in formats:
            put(f"snapshot_{k:04d}.vtk", snapshot_vtk(state, mesh, config_hash))
    put("diagnostics.csv", diagnostics_csv(traj, config_hash))
    return written
