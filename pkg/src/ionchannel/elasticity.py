"""Linear isotropic elasticity with thermal strain and regionwise initial stress.

P1 vector displacement, component-major dof numbering (component c of vertex i
is dof c*nv + i).  Voigt order is (xx, yy, zz, yz, xz, xy) with engineering
shear strains.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import fem
from .errors import DomainError, ParameterError, RigidModeError, SingularMatrixError
from .linalg import as_csr, bicg_solve, sparse_lu_solve
from .mesh import FACET_TAGS, REGIONS, Mesh

logger = logging.getLogger(__name__)


def lame_coefficients(E, nu):
    if not E > 0:
        raise DomainError(f"Young modulus must be positive, got {E}")
    if not 0 <= nu < 0.5:
        raise DomainError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
    lam = nu * E / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return lam, mu


@dataclass(frozen=True)
class ElasticMaterial:
    young: float
    poisson: float
    alpha: tuple = (0.0, 0.0, 0.0)
    T_ref: float = 300.0

    def __post_init__(self):
        lame_coefficients(self.young, self.poisson)
        if len(self.alpha) != 3:
            raise ParameterError("alpha needs three components")

    def voigt(self):
        lam, mu = lame_coefficients(self.young, self.poisson)
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] += 2 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D


@dataclass
class MechanicalLoad:
    body_force: Sequence[float] | Callable = (0.0, 0.0, 0.0)  # N m^-3, uniform or f(x)
    initial_stress: Mapping[str, Sequence[float]] = field(default_factory=dict)  # region -> Voigt
    dirichlet: Mapping[str, Sequence[float]] = field(default_factory=dict)  # tag -> displacement
    point_constraints: Sequence[tuple] = ()  # (vertex, component, value)

    def __post_init__(self):
        for name, s in self.initial_stress.items():
            if name not in REGIONS:
                raise ParameterError(f"unknown region {name!r}")
            if len(s) != 6:
                raise ParameterError("initial stress needs 6 Voigt components (symmetric tensor)")
        for tag in self.dirichlet:
            if tag not in FACET_TAGS:
                raise ParameterError(f"unknown boundary tag {tag!r}")


def _strain_matrix(grads):
    """(ne, 6, 12) Voigt strain-displacement matrices, columns component-major (c*4 + a)."""
    ne = len(grads)
    Bm = np.zeros((ne, 6, 3, 4))
    gx, gy, gz = grads[:, :, 0], grads[:, :, 1], grads[:, :, 2]
    Bm[:, 0, 0] = gx
    Bm[:, 1, 1] = gy
    Bm[:, 2, 2] = gz
    Bm[:, 3, 1], Bm[:, 3, 2] = gz, gy
    Bm[:, 4, 0], Bm[:, 4, 2] = gz, gx
    Bm[:, 5, 0], Bm[:, 5, 1] = gy, gx
    return Bm.reshape(ne, 6, 12)


def _material_arrays(mesh: Mesh, materials: Mapping[str, ElasticMaterial]):
    ne = mesh.n_tets
    D = np.zeros((ne, 6, 6))
    alpha = np.zeros((ne, 3))
    tref = np.zeros(ne)
    for k, name in enumerate(REGIONS):
        sel = mesh.regions == k
        if not sel.any():
            continue
        if name not in materials:
            raise ParameterError(f"no elastic material for region {name}")
        mat = materials[name]
        D[sel] = mat.voigt()
        alpha[sel] = mat.alpha
        tref[sel] = mat.T_ref
    return D, alpha, tref


def _dof_map(mesh):
    nv = mesh.n_vertices
    return np.hstack([mesh.tets + c * nv for c in range(3)])


def assemble_stiffness(mesh: Mesh, materials, geometry=None):
    grads, vol = geometry if geometry is not None else fem.tet_geometry(mesh.vertices, mesh.tets)
    D, _, _ = _material_arrays(mesh, materials)
    Bm = _strain_matrix(grads)
    loc = vol[:, None, None] * np.einsum("eki,ekl,elj->eij", Bm, D, Bm)
    dm = _dof_map(mesh)
    n = 3 * mesh.n_vertices
    return fem.scatter(dm, dm, loc, (n, n))


def assemble_thermal_load(mesh: Mesh, materials, T, geometry=None):
    """int C eps_th(T) : eps(v), eps_th = diag(alpha) (T - T_ref), T piecewise linear."""
    grads, vol = geometry if geometry is not None else fem.tet_geometry(mesh.vertices, mesh.tets)
    D, alpha, tref = _material_arrays(mesh, materials)
    T = np.broadcast_to(np.asarray(T, dtype=float), (mesh.n_vertices,))
    dT = T[mesh.tets].mean(axis=1) - tref
    eps = np.zeros((mesh.n_tets, 6))
    eps[:, :3] = alpha * dT[:, None]
    sig = np.einsum("ekl,el->ek", D, eps)
    loc = vol[:, None] * np.einsum("eki,ek->ei", _strain_matrix(grads), sig)
    return fem.scatter_vector(_dof_map(mesh), loc, 3 * mesh.n_vertices)


def assemble_initial_stress_load(mesh: Mesh, initial_stress, geometry=None):
    """-int sigma_0 : eps(v), the weak form of the div sigma_0 term."""
    grads, vol = geometry if geometry is not None else fem.tet_geometry(mesh.vertices, mesh.tets)
    sig = np.zeros((mesh.n_tets, 6))
    for name, s in initial_stress.items():
        sig[mesh.region_mask(name)] = s
    loc = -vol[:, None] * np.einsum("eki,ek->ei", _strain_matrix(grads), sig)
    return fem.scatter_vector(_dof_map(mesh), loc, 3 * mesh.n_vertices)


def assemble_body_load(mesh: Mesh, f, geometry=None):
    """int f . v for a uniform force (3,) or a callable f(x) -> (n, 3)."""
    _, vol = geometry if geometry is not None else fem.tet_geometry(mesh.vertices, mesh.tets)
    nv = mesh.n_vertices
    out = np.zeros(3 * nv)
    if callable(f):
        V = fem.p1_space(mesh)
        for c in range(3):
            out[c * nv:(c + 1) * nv] = fem.load_vector(V, lambda x, c=c: np.asarray(f(x))[:, c], 4, (None, vol))
        return out
    f = np.asarray(f, dtype=float)
    for c in range(3):
        out[c * nv:(c + 1) * nv] = fem.scatter_vector(mesh.tets, np.repeat(vol[:, None] / 4 * f[c], 4, 1), nv)
    return out


def rigid_modes(vertices):
    """Six infinitesimal rigid displacements, component-major, shape (6, 3 nv)."""
    x = np.asarray(vertices, dtype=float)
    nv = len(x)
    modes = []
    for c in range(3):
        m = np.zeros((3, nv))
        m[c] = 1.0
        modes.append(m)
    for w in np.eye(3):
        modes.append(np.cross(w, x).T)
    return np.array([m.reshape(-1) for m in modes])


def _constraints(mesh, load):
    nv = mesh.n_vertices
    dofs, vals = [], []
    for tag, d in load.dirichlet.items():
        verts = mesh.boundary_vertices(tag)
        for c in range(3):
            dofs.append(verts + c * nv)
            vals.append(np.full(len(verts), float(d[c])))
    for v, c, val in load.point_constraints:
        dofs.append(np.array([int(c) * nv + int(v)]))
        vals.append(np.array([float(val)]))
    if not dofs:
        raise RigidModeError("no displacement constraints: the elastic system has rigid modes")
    dofs = np.concatenate(dofs)
    vals = np.concatenate(vals)
    _, first = np.unique(dofs, return_index=True)
    return dofs[first], vals[first]


def solve_displacement(mesh: Mesh, materials, load: MechanicalLoad, T=None, tol=1e-10, max_iter=None):
    """Displacement (nv, 3); BiCG with Jacobi preconditioning, sparse LU fallback."""
    geometry = fem.tet_geometry(mesh.vertices, mesh.tets)
    A = assemble_stiffness(mesh, materials, geometry)
    nv = mesh.n_vertices
    b = assemble_body_load(mesh, load.body_force, geometry)
    if load.initial_stress:
        b += assemble_initial_stress_load(mesh, load.initial_stress, geometry)
    if T is not None:
        b += assemble_thermal_load(mesh, materials, T, geometry)
    dofs, vals = _constraints(mesh, load)
    free = np.ones(3 * nv, dtype=bool)
    free[dofs] = False
    d = np.zeros(3 * nv)
    d[dofs] = vals
    rhs = (b - A @ d)[free]
    Aff = as_csr(A[free][:, free])
    if not np.any(rhs):
        return d.reshape(3, nv).T.copy()
    # rigid modes surviving the constraints make Aff singular
    if np.any(Aff.diagonal() <= 0):
        raise RigidModeError("elastic stiffness has a zero diagonal entry (unconstrained dof)")
    x, report = bicg_solve(Aff, rhs, tol=tol, max_iter=max_iter or 4 * Aff.shape[0], jacobi=Aff)
    if not report.converged:
        logger.warning("BiCG did not converge for elasticity (%.3e); using sparse LU", report.final_residual_norm)
        try:
            x = sparse_lu_solve(Aff, rhs)
        except SingularMatrixError as exc:
            raise RigidModeError(f"elastic system is singular: {exc}") from None
    d[free] = x
    return d.reshape(3, nv).T.copy()


def stiffness_matrix(mesh, materials):
    return as_csr(assemble_stiffness(mesh, materials))


def strain(mesh: Mesh, d):
    """Elementwise Voigt strain (engineering shears) of a P1 displacement (nv, 3)."""
    grads, _ = fem.tet_geometry(mesh.vertices, mesh.tets)
    u = np.asarray(d, dtype=float).T[:, mesh.tets]  # (3, ne, 4)
    loc = u.transpose(1, 0, 2).reshape(mesh.n_tets, 12)
    return np.einsum("eki,ei->ek", _strain_matrix(grads), loc)


__all__ = [
    "ElasticMaterial", "MechanicalLoad", "lame_coefficients", "assemble_stiffness",
    "assemble_thermal_load", "assemble_initial_stress_load", "assemble_body_load",
    "solve_displacement", "rigid_modes", "strain", "stiffness_matrix",
]
