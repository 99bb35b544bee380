"""Time-discrete generalized Stokes flow with the ionic electric body force.

Unknowns are the velocity u and the kinematic pressure p/rho_f.  Two
discretizations are provided: the Taylor-Hood pair (P2 velocity, P1 pressure)
and equal-order P1/P1 with Hughes-Franca-Balestra (HFB) residual pressure
stabilization weighted by h_K^2/delta.  Stress data on Neumann tags are
sigma n = pbar n.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse

from . import fem
from .constants import ELEMENTARY_CHARGE
from .errors import DomainError, FloatingSystemError, ParameterError
from .linalg import LUFactor, SolveReport, as_csr, uzawa_solve
from .mesh import FACET_TAGS, Mesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FluidProperties:
    density: float = 1000.0  # kg m^-3
    viscosity: float = 1e-3  # Pa s

    def __post_init__(self):
        if not (self.density > 0 and self.viscosity > 0):
            raise DomainError("fluid density and viscosity must be positive")

    @property
    def kinematic_viscosity(self):
        return self.viscosity / self.density


@dataclass
class StokesBC:
    """Per tag: ``velocity`` (3-vector or g(x) -> (n, 3), Dirichlet) or ``stress`` (pbar, sigma n = pbar n)."""

    velocity: Mapping[str, Sequence[float]] = field(default_factory=dict)
    stress: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        both = set(self.velocity) & set(self.stress)
        if both:
            raise ParameterError(f"tags with both Dirichlet and stress data: {sorted(both)}")
        for tag in list(self.velocity) + list(self.stress):
            if tag not in FACET_TAGS:
                raise ParameterError(f"unknown boundary tag {tag!r}")


def electric_body_force(mesh: Mesh, concentrations, species, E, charge=ELEMENTARY_CHARGE):
    """f = q sum_i z_i n_i E per element, concentrations at element midpoints."""
    n = np.asarray(concentrations, dtype=float).reshape(len(species), -1)
    z = np.array([s.valence for s in species], dtype=float)
    rho = charge * (z @ n)[mesh.tets].mean(axis=1)
    return rho[:, None] * np.asarray(E, dtype=float)


@dataclass
class StokesSystem:
    kind: str  # 'TH' or 'HFB'
    velocity_space: fem.ElementSpace
    pressure_space: fem.ElementSpace
    A: scipy.sparse.csr_matrix
    B: scipy.sparse.csr_matrix  # gradient coupling (columns of the momentum rows)
    B_row: scipy.sparse.csr_matrix  # constraint rows (B minus HFB velocity term)
    C: scipy.sparse.csr_matrix | None
    f: np.ndarray
    g: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    pressure_mass: scipy.sparse.csr_matrix
    nu: float
    density: float
    pinned_pressure: int | None = None

    @property
    def n_velocity(self):
        return 3 * self.velocity_space.n_dofs


def _sym_grad_local(dphi, weights, vol, nu):
    """Blocks nu[delta_ac grad phi_i.grad phi_j + d_c phi_i d_a phi_j] -> (ne, 3n, 3n) component-major."""
    ne, nq, nl, _ = dphi.shape
    lap = np.einsum("q,eqid,eqjd->eij", weights, dphi, dphi)
    cross = np.einsum("q,eqic,eqja->eaicj", weights, dphi, dphi)  # row comp a, col comp c
    loc = np.zeros((ne, 3, nl, 3, nl))
    for a in range(3):
        loc[:, a, :, a, :] += lap
    loc += cross
    return nu * vol[:, None, None] * loc.reshape(ne, 3 * nl, 3 * nl)


def _vector_map(space_):
    n = space_.n_dofs
    return np.hstack([space_.dof_map + c * n for c in range(3)])


def _facet_load(space_, mesh, tags_values):
    """int_Gamma pbar n . v for constant pbar per tag, component-major vector."""
    n = space_.n_dofs
    out = np.zeros(3 * n)
    for tag, pbar in tags_values.items():
        sel = mesh.facet_tags == FACET_TAGS.index(tag)
        facets = mesh.facets[sel]
        if not len(facets) or pbar == 0:
            continue
        normals, area = fem.facet_normals(mesh, facets)
        if space_.kind == "P1":
            dofs = facets
            w = np.repeat(area[:, None] / 3.0, 3, axis=1)
        else:
            fe = np.sort(np.stack([facets[:, [0, 1]], facets[:, [1, 2]], facets[:, [0, 2]]], axis=1), axis=2)
            ids = fem._edge_ids(space_.edges, fe.reshape(-1, 2)).reshape(-1, 3) + mesh.n_vertices
            dofs = ids  # P2 vertex functions integrate to zero on a triangle
            w = np.repeat(area[:, None] / 3.0, 3, axis=1)
        for c in range(3):
            out[c * n:(c + 1) * n] += fem.scatter_vector(dofs, w * (pbar * normals[:, c])[:, None], n)
    return out


def _common(mesh, kind, props, bcs, f, u_old, dt):
    if not bcs.velocity and not bcs.stress:
        raise FloatingSystemError("Stokes system without any velocity or stress boundary condition")
    if not bcs.velocity:
        raise FloatingSystemError("Stokes system without Dirichlet velocity has rigid modes")
    geometry = fem.tet_geometry(mesh.vertices, mesh.tets)
    g, vol = geometry
    V = fem.space(mesh, "P2" if kind == "TH" else "P1")
    Q = fem.p1_space(mesh)
    nu = props.kinematic_viscosity
    qa = fem.tet_quadrature(2)
    dphi = fem.basis_gradients(V.kind, qa.points, g)
    vmap = _vector_map(V)
    nV = 3 * V.n_dofs
    A = fem.scatter(vmap, vmap, _sym_grad_local(dphi, qa.weights, vol, nu), (nV, nV))
    qm = fem.tet_quadrature(4)
    phi_m = fem.basis_values(V.kind, qm.points)
    mloc = np.einsum("q,qi,qj->ij", qm.weights, phi_m, phi_m)
    M = scipy.sparse.block_diag([fem.scatter(V.dof_map, V.dof_map, vol[:, None, None] * mloc[None],
                                             (V.n_dofs, V.n_dofs))] * 3, format="csr")
    # b(v, q) = -int q div v
    psi = fem.basis_values("P1", qa.points)
    bloc = -np.einsum("q,qi,eqjc->eicj", qa.weights, psi, dphi) * vol[:, None, None, None]
    bloc = bloc.reshape(len(vol), 4, 3 * V.n_local)
    B = fem.scatter(Q.dof_map, vmap, bloc, (Q.n_dofs, nV))
    rhs = np.zeros(nV)
    integ = np.einsum("q,qi->i", qm.weights, phi_m)  # int phi_j / |K|
    if callable(f):
        for c in range(3):
            rhs[c * V.n_dofs:(c + 1) * V.n_dofs] += fem.load_vector(
                V, lambda x, c=c: np.asarray(f(x))[:, c] / props.density, 6, geometry)
    elif f is not None:
        f = np.asarray(f, dtype=float).reshape(-1, 3)
        for c in range(3):
            rhs[c * V.n_dofs:(c + 1) * V.n_dofs] += fem.scatter_vector(
                V.dof_map, (vol * f[:, c] / props.density)[:, None] * integ[None], V.n_dofs)
    steady = not np.isfinite(dt)
    if not steady:
        A = A + M / dt
        if u_old is not None:
            rhs += M @ _flat(u_old, V.n_dofs) / dt
    rhs += _facet_load(V, mesh, bcs.stress) / props.density
    # Dirichlet velocity dofs
    dd, dv = [], []
    coords = V.dof_coordinates() if any(callable(v) for v in bcs.velocity.values()) else None
    for tag, val in bcs.velocity.items():
        dofs = V.boundary_dofs(tag)
        vals = np.asarray(val(coords[dofs]), dtype=float).reshape(-1, 3) if callable(val) else None
        for c in range(3):
            dd.append(dofs + c * V.n_dofs)
            dv.append(vals[:, c] if vals is not None else np.full(len(dofs), float(val[c])))
    dd = np.concatenate(dd)
    dv = np.concatenate(dv)
    _, first = np.unique(dd, return_index=True)
    dd, dv = dd[first], dv[first]
    Mp = fem.mass_matrix(Q, 2, geometry)
    return geometry, V, Q, nu, as_csr(A), B, M, rhs, dd, dv, Mp, steady, dphi, qa


def _flat(u, n):
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        return u.T.reshape(-1)
    return u


def assemble_taylor_hood(mesh: Mesh, props: FluidProperties, bcs: StokesBC, f=None, u_old=None, dt=np.inf):
    geometry, V, Q, nu, A, B, M, rhs, dd, dv, Mp, steady, _, _ = _common(mesh, "TH", props, bcs, f, u_old, dt)
    pin = None if bcs.stress else 0
    return StokesSystem("TH", V, Q, A, B, B, None, rhs, np.zeros(Q.n_dofs), dd, dv, Mp, nu, props.density, pin)


def assemble_hfb(mesh: Mesh, props: FluidProperties, bcs: StokesBC, f=None, u_old=None, dt=np.inf, delta=None):
    """Equal-order P1/P1 with -sum_K tau_K (residual, grad q)_K, tau_K = h_K^2/delta."""
    nu = props.kinematic_viscosity
    delta = 12.0 * nu if delta is None else float(delta)
    if not delta > 0:
        raise ParameterError("HFB parameter delta must be positive")
    geometry, V, Q, nu, A, B, M, rhs, dd, dv, Mp, steady, dphi, qa = _common(mesh, "HFB", props, bcs, f,
                                                                           u_old, dt)
    g, vol = geometry
    hK = fem.element_diameters(mesh.vertices, mesh.tets)
    tau = hK ** 2 / delta
    C = fem.p1_stiffness(mesh, coef=tau, geometry=geometry)
    nv = mesh.n_vertices
    gp = np.zeros(nv)
    # -(tau f, grad q): f elementwise constant
    if f is not None:
        if callable(f):
            f = np.asarray(f(mesh.vertices[mesh.tets].mean(axis=1)))
        fr = np.asarray(f, dtype=float).reshape(-1, 3) / props.density
        gp -= fem.scatter_vector(mesh.tets, (tau * vol)[:, None] * np.einsum("eid,ed->ei", g, fr), nv)
    B_row = B
    if not steady:
        # -(tau/dt) (u, grad q): P1 velocity, int phi_j = |K|/4
        loc = (tau * vol / 4.0 / dt)[:, None, None, None] * np.broadcast_to(g[:, :, None, :], (len(vol), 4, 4, 3))
        loc = loc.transpose(0, 1, 3, 2).reshape(len(vol), 4, 12)  # (e, q_i, (c, j))
        G = fem.scatter(mesh.tets, _vector_map(V), loc, (nv, 3 * nv))
        B_row = as_csr(B - G)
        if u_old is not None:
            gp -= G @ _flat(u_old, nv)
    pin = None if bcs.stress else 0
    return StokesSystem("HFB", V, Q, A, B, B_row, as_csr(C), rhs, gp, dd, dv, Mp, nu, props.density, pin)


@dataclass
class StokesSolution:
    u: np.ndarray  # (n_velocity_dofs, 3)
    p: np.ndarray  # kinematic pressure p/rho at P1 dofs
    report: SolveReport
    system: StokesSystem = field(repr=False)

    @property
    def pressure(self):
        """Physical pressure (Pa)."""
        return self.p * self.system.density

    def vertex_velocity(self):
        return self.u[: self.system.pressure_space.n_dofs]


def _reduce(system: StokesSystem):
    nV = system.n_velocity
    free = np.ones(nV, dtype=bool)
    free[system.dirichlet_dofs] = False
    ud = np.zeros(nV)
    ud[system.dirichlet_dofs] = system.dirichlet_values
    A = system.A
    Aff = as_csr(A[free][:, free])
    ff = system.f[free] - (A @ ud)[free]
    Bf = as_csr(system.B[:, free])
    Brf = as_csr(system.B_row[:, free])
    gp = system.g - system.B_row @ ud
    C = system.C
    if system.pinned_pressure is not None:
        keep = np.ones(system.B.shape[0], dtype=bool)
        keep[system.pinned_pressure] = False
        Bf, Brf, gp = as_csr(Bf[keep]), as_csr(Brf[keep]), gp[keep]
        if C is not None:
            C = as_csr(C[keep][:, keep])
    else:
        keep = None
    return free, ud, Aff, ff, Bf, Brf, gp, C, keep


def solve_stokes(system: StokesSystem, method="uzawa", rho=None, tol=1e-10, max_iter=3000):
    """Solve the saddle system; Uzawa falls back to sparse LU on non-convergence."""
    free, ud, Aff, ff, Bf, Brf, gp, C, keep = _reduce(system)
    report = None
    if method == "uzawa":
        P = system.pressure_mass / system.nu
        if keep is not None:
            P = as_csr(P[keep][:, keep])
        uf, p, report = uzawa_solve(Aff, Bf, ff, P=P, rho=rho, tol=tol, g=gp, C=C, B_row=Brf, max_iter=max_iter)
        if not report.converged:
            logger.warning("Uzawa failed (residual %.3e after %d iterations); falling back to sparse LU",
                           report.final_residual_norm, report.iterations)
            method = "direct"
    if method == "direct":
        npres = Bf.shape[0]
        lower = -C if C is not None else scipy.sparse.csr_matrix((npres, npres))
        K = scipy.sparse.bmat([[Aff, Bf.T], [Brf, lower]], format="csr")
        sol = LUFactor(K).solve(np.concatenate([ff, gp]))
        uf, p = sol[: Aff.shape[0]], sol[Aff.shape[0]:]
        res = np.linalg.norm(K @ sol - np.concatenate([ff, gp])) / max(np.linalg.norm(ff), 1e-300)
        report = SolveReport(1, float(res), True, "direct")
    elif method != "uzawa":
        raise ParameterError(f"unknown Stokes solver {method!r}")
    u = ud.copy()
    u[free] = uf
    if keep is not None:
        full = np.zeros(system.B.shape[0])
        full[keep] = p
        p = full
    nd = system.velocity_space.n_dofs
    return StokesSolution(u.reshape(3, nd).T.copy(), p, report, system)


def vertex_velocity_from_p2(u, n_vertices):
    return np.asarray(u)[:n_vertices]
