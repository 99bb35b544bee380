"""Axial line cuts (CSV), legacy VTK snapshots and convergence logs.

Every number is written with 17 significant digits so reruns compare
bitwise.  Files are written through a temporary name and renamed.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SamplingError
from .mesh import Mesh, _atomic_write

_FMT = "{:.16e}"


def _num(x):
    return _FMT.format(float(x))


def locate_points(mesh: Mesh, points, tol=1e-10):
    """Containing tet and barycentric coordinates for each point.

    The lowest-index tet whose barycentric coordinates are all >= -tol wins,
    which makes the choice deterministic for points on shared faces.
    """
    p = mesh.vertices
    t = mesh.tets
    v0 = p[t[:, 0]]
    J = np.stack([p[t[:, 1]] - v0, p[t[:, 2]] - v0, p[t[:, 3]] - v0], axis=2)  # (ne, 3, 3)
    Jinv = np.linalg.inv(J)
    lo = p[t].min(axis=1)
    hi = p[t].max(axis=1)
    scale = float(np.max(hi - lo)) if len(t) else 1.0
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    elems = np.empty(len(pts), dtype=np.int64)
    bary = np.empty((len(pts), 4))
    for k, x in enumerate(pts):
        cand = np.flatnonzero(np.all((x >= lo - tol * scale) & (x <= hi + tol * scale), axis=1))
        if cand.size:
            lam = np.einsum("eij,ej->ei", Jinv[cand], x - v0[cand])
            full = np.column_stack([1.0 - lam.sum(axis=1), lam])
            ok = np.flatnonzero(np.all(full >= -tol, axis=1))
            if ok.size:
                elems[k] = cand[ok[0]]
                bary[k] = full[ok[0]]
                continue
        raise SamplingError(f"sample point {x.tolist()} lies outside the mesh")
    return elems, bary


def axis_samples(mesh: Mesh, n_samples):
    if n_samples < 2:
        raise SamplingError("a line cut needs at least two samples")
    zmin, zmax = mesh.vertices[:, 2].min(), mesh.vertices[:, 2].max()
    z = np.linspace(zmin, zmax, n_samples)
    return np.column_stack([np.zeros_like(z), np.zeros_like(z), z])


@dataclass
class LineCut:
    z: np.ndarray
    columns: dict  # name -> values
    time: float

    def __post_init__(self):
        if len(self.z) < 2 or np.any(np.diff(self.z) <= 0):
            raise SamplingError("line cut samples must be strictly increasing and at least two")


def sample_line(state, n_samples) -> LineCut:
    """Interpolate the state's fields at evenly spaced points on the channel axis."""
    mesh = state.mesh
    pts = axis_samples(mesh, n_samples)
    elems, bary = locate_points(mesh, pts)
    from . import fem

    p1 = fem.p1_space(mesh)
    cols = {}
    for name, values in zip(state.species_names, state.n):
        cols[f"n_{name}[m^-3]"] = fem.evaluate(p1, values, elems, bary)
    cols["phi[V]"] = fem.evaluate(p1, state.phi, elems, bary)
    cols["T[K]"] = fem.evaluate(p1, state.T, elems, bary)
    cols["p[Pa]"] = fem.evaluate(p1, state.p, elems, bary)
    vspace = fem.p2_space(mesh) if len(state.u) > mesh.n_vertices else p1
    for c, axis in enumerate("xyz"):
        cols[f"u_{axis}[m/s]"] = fem.evaluate(vspace, state.u[:, c], elems, bary)
    return LineCut(pts[:, 2], cols, state.t)


def line_cut_text(cut: LineCut, scenario="") -> str:
    buf = io.StringIO()
    buf.write(f"# scenario = {scenario}\n")
    buf.write(f"# t[s] = {_num(cut.time)}\n")
    buf.write("# " + ",".join(["z[m]"] + list(cut.columns)) + "\n")
    data = np.column_stack([cut.z] + [np.asarray(v) for v in cut.columns.values()])
    for row in data:
        buf.write(",".join(_num(x) for x in row) + "\n")
    return buf.getvalue()


def write_line_cut(state, n_samples, path, scenario=""):
    cut = sample_line(state, n_samples)
    _atomic_write(Path(path), line_cut_text(cut, scenario))
    return cut


def read_line_cut(path):
    """Parse a line-cut CSV back into (z, {column: values}, t)."""
    lines = Path(path).read_text().splitlines()
    t = None
    names = None
    rows = []
    for line in lines:
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("t[s] ="):
                t = float(body.split("=", 1)[1])
            elif body.startswith("z[m]"):
                names = body.split(",")
            continue
        if line.strip():
            rows.append([float(x) for x in line.split(",")])
    data = np.array(rows)
    cols = {name: data[:, k] for k, name in enumerate(names[1:], start=1)}
    return data[:, 0], cols, t


# ---------------------------------------------------------------- VTK


def vtk_text(mesh: Mesh, point_scalars: dict, point_vectors: dict, title="ionchannel") -> str:
    buf = io.StringIO()
    nv, nt = mesh.n_vertices, mesh.n_tets
    buf.write("# vtk DataFile Version 3.0\n")
    buf.write(title.replace("\n", " ")[:255] + "\n")
    buf.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    buf.write(f"POINTS {nv} double\n")
    for x in mesh.vertices:
        buf.write(" ".join(_num(c) for c in x) + "\n")
    buf.write(f"CELLS {nt} {5 * nt}\n")
    for t in mesh.tets:
        buf.write("4 " + " ".join(str(int(i)) for i in t) + "\n")
    buf.write(f"CELL_TYPES {nt}\n")
    buf.write("10\n" * nt)
    buf.write(f"CELL_DATA {nt}\nSCALARS region int 1\nLOOKUP_TABLE default\n")
    for r in mesh.regions:
        buf.write(f"{int(r)}\n")
    buf.write(f"POINT_DATA {nv}\n")
    for name, values in point_scalars.items():
        values = np.asarray(values, dtype=float)
        if values.shape != (nv,):
            raise ValueError(f"scalar field {name} has {values.shape[0]} values for {nv} points")
        buf.write(f"SCALARS {_vtk_name(name)} double 1\nLOOKUP_TABLE default\n")
        for v in values:
            buf.write(_num(v) + "\n")
    for name, values in point_vectors.items():
        values = np.asarray(values, dtype=float)[:nv]
        if values.shape != (nv, 3):
            raise ValueError(f"vector field {name} has shape {values.shape}, expected ({nv}, 3)")
        buf.write(f"VECTORS {_vtk_name(name)} double\n")
        for v in values:
            buf.write(" ".join(_num(c) for c in v) + "\n")
    return buf.getvalue()


def _vtk_name(name):
    return "".join(ch if ch.isalnum() or ch in "_-" else "_" for ch in name)


def export_vtk(state, path):
    scalars = {f"n_{name}": values for name, values in zip(state.species_names, state.n)}
    scalars.update({"phi": state.phi, "T": state.T, "p": state.p})
    nv = state.mesh.n_vertices
    d = state.d_channel if state.d_channel is not None else np.zeros((nv, 3))
    vectors = {"u": np.asarray(state.u)[:nv], "d": d}
    _atomic_write(Path(path), vtk_text(state.mesh, scalars, vectors, f"t = {_num(state.t)} s"))


@dataclass
class VTKData:
    points: np.ndarray
    cells: np.ndarray
    cell_types: np.ndarray
    cell_data: dict
    point_data: dict


def read_vtk(path) -> VTKData:
    """Minimal reader for the legacy ASCII unstructured grids written above."""
    tokens = Path(path).read_text().split("\n")
    if not tokens[0].startswith("# vtk DataFile Version"):
        raise ValueError("not a legacy VTK file")
    if tokens[2].strip() != "ASCII" or tokens[3].strip() != "DATASET UNSTRUCTURED_GRID":
        raise ValueError("only ASCII unstructured grids are supported")
    words = " ".join(tokens[4:]).split()
    pos = 0

    def take(n, conv=float):
        nonlocal pos
        out = [conv(w) for w in words[pos:pos + n]]
        if len(out) != n:
            raise ValueError("truncated VTK file")
        pos += n
        return out

    points = cells = types = None
    cell_data, point_data = {}, {}
    section = None
    while pos < len(words):
        key = words[pos]
        pos += 1
        if key == "POINTS":
            n = int(words[pos]); pos += 2
            points = np.array(take(3 * n)).reshape(n, 3)
        elif key == "CELLS":
            n, size = int(words[pos]), int(words[pos + 1]); pos += 2
            raw = np.array(take(size, int))
            cells = raw.reshape(n, -1)[:, 1:]
        elif key == "CELL_TYPES":
            n = int(words[pos]); pos += 1
            types = np.array(take(n, int))
        elif key in ("CELL_DATA", "POINT_DATA"):
            section = cell_data if key == "CELL_DATA" else point_data
            count = int(words[pos]); pos += 1
            section["__count__"] = count
        elif key == "SCALARS":
            name = words[pos]; pos += 3
            if words[pos] == "LOOKUP_TABLE":
                pos += 2
            section[name] = np.array(take(section["__count__"]))
        elif key == "VECTORS":
            name = words[pos]; pos += 2
            section[name] = np.array(take(3 * section["__count__"])).reshape(-1, 3)
        else:
            raise ValueError(f"unexpected VTK keyword {key!r}")
    cell_data.pop("__count__", None)
    point_data.pop("__count__", None)
    return VTKData(points, cells, types, cell_data, point_data)


# ---------------------------------------------------------------- logs


class ConvergenceLog:
    """Rows of (step, time, inner iteration, criterion, extra columns)."""

    header = ("step", "t[s]", "j", "criterion", "stokes_iterations", "stokes_residual")

    def __init__(self):
        self.rows = []

    def add(self, step, t, j, criterion, stokes_iterations=0, stokes_residual=0.0):
        self.rows.append((int(step), float(t), int(j), float(criterion), int(stokes_iterations),
                          float(stokes_residual)))

    def text(self):
        buf = io.StringIO()
        buf.write("# " + ",".join(self.header) + "\n")
        for s, t, j, c, si, sr in self.rows:
            buf.write(f"{s},{_num(t)},{j},{_num(c)},{si},{_num(sr)}\n")
        return buf.getvalue()

    def write(self, path):
        _atomic_write(Path(path), self.text())
