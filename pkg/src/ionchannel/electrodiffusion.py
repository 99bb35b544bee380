"""Poisson and thermal velocity-extended Nernst-Planck equations.

The Nernst-Planck operator uses edge averaged finite elements (EAFE): along
each edge the fitted coefficient D e^Psi is averaged harmonically, which gives
the Bernoulli-function edge fluxes of the Scharfetter-Gummel scheme.  The
system in the Slotboom variable n~ = n e^-Psi is turned into a system for n by
column rescaling; the result is a column-dominant M-matrix whenever the mesh
stiffness has nonpositive off-diagonals and u = 0.

All routines are unit agnostic: the coupling driver calls them with
nondimensional data (charge unit 1, k_B = 1/T_ref, permittivity lambda^2).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse

from . import fem
from .constants import BOLTZMANN, ELEMENTARY_CHARGE
from .errors import AssemblyError, DomainError, FloatingSystemError, GummelDivergenceError, RescalingError
from .linalg import LUFactor, as_csr
from .mesh import FACET_TAGS, REGIONS, Mesh

logger = logging.getLogger(__name__)

PSI_LIMIT = 500.0


@dataclass(frozen=True)
class Species:
    name: str
    valence: int
    mobility: float  # m^2 V^-1 s^-1
    dirichlet: Mapping[str, float] = field(default_factory=dict)  # tag -> m^-3
    initial: float = 0.0

    def __post_init__(self):
        if not self.mobility > 0:
            raise DomainError(f"{self.name}: mobility must be positive")
        for tag, v in self.dirichlet.items():
            if tag not in FACET_TAGS:
                raise DomainError(f"{self.name}: unknown boundary tag {tag!r}")
            if not v > 0:
                raise DomainError(f"{self.name}: Dirichlet concentration on {tag} must be positive")


@dataclass(frozen=True)
class ElectrostaticEnvironment:
    permittivity: float
    fixed_charge: Mapping[str, float] = field(default_factory=dict)  # region -> signed density (m^-3)
    charge: float = ELEMENTARY_CHARGE
    boltzmann: float = BOLTZMANN

    def __post_init__(self):
        if not self.permittivity > 0:
            raise DomainError("permittivity must be positive")

    def thermal_voltage(self, T):
        return self.boltzmann * np.asarray(T, dtype=float) / self.charge


@dataclass
class SlotboomData:
    psi_element: np.ndarray
    psi_vertex: np.ndarray
    T_ref: float


def einstein_diffusivity(species: Species, T, env: ElectrostaticEnvironment | None = None):
    """D = mu k_B T / (q |z|)."""
    if species.valence == 0:
        raise DomainError(f"{species.name}: drift-free species (z = 0) needs a user-supplied diffusivity")
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise DomainError("temperature must be positive")
    kB = BOLTZMANN if env is None else env.boltzmann
    q = ELEMENTARY_CHARGE if env is None else env.charge
    out = species.mobility * kB * T / (q * abs(species.valence))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- Poisson


def fixed_charge_vertex(mesh: Mesh, env: ElectrostaticEnvironment, geometry=None):
    """Lumped integral of the region-wise fixed charge density (per vertex)."""
    if not env.fixed_charge:
        return np.zeros(mesh.n_vertices)
    _, vol = geometry if geometry is not None else fem.tet_geometry(mesh.vertices, mesh.tets)
    rho = np.zeros(mesh.n_tets)
    for name, value in env.fixed_charge.items():
        rho[mesh.regions == REGIONS.index(name)] = value
    return fem.scatter_vector(mesh.tets, np.repeat((rho * vol / 4.0)[:, None], 4, axis=1), mesh.n_vertices)


def _dirichlet_nodes(mesh, bcs):
    dofs, vals = [], []
    for tag, value in bcs.items():
        v = mesh.boundary_vertices(tag)
        dofs.append(v)
        vals.append(np.full(len(v), float(value)))
    if not dofs:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    d = np.concatenate(dofs)
    g = np.concatenate(vals)
    # later tags win on shared vertices (deterministic)
    _, last = np.unique(d[::-1], return_index=True)
    idx = len(d) - 1 - last
    return d[idx], g[idx]


def solve_poisson(mesh: Mesh, env: ElectrostaticEnvironment, species: Sequence[Species], concentrations,
                  bcs: Mapping[str, float], T=None, phi_ref=None, source=None, tol=1e-12, max_newton=50,
                  geometry=None, stiffness=None, mass=None):
    """Solve -div(eps grad phi) = q (sum z_i n_i + rho_fixed) with P1 elements.

    The charge is integrated with the lumped mass.  When ``phi_ref`` is given
    the charge is Boltzmann-corrected, n_i exp(-z_i (phi - phi_ref)/V_T), and
    the nonlinear equation is solved by damped Newton (Gummel's Poisson step).
    ``source`` is an optional extra right-hand side density (vertex values).
    """
    if not bcs:
        raise FloatingSystemError("Poisson problem with all-Neumann boundary is singular")
    geometry = geometry or fem.tet_geometry(mesh.vertices, mesh.tets)
    S = stiffness if stiffness is not None else fem.p1_stiffness(mesh, geometry=geometry)
    S = env.permittivity * S
    m = mass if mass is not None else fem.lumped_mass(mesh, geometry=geometry)
    dofs, vals = _dirichlet_nodes(mesh, bcs)
    nv = mesh.n_vertices
    fixed = env.charge * fixed_charge_vertex(mesh, env, geometry)
    extra = np.zeros(nv) if source is None else m * np.asarray(source, dtype=float)
    z = np.array([s.valence for s in species], dtype=float)
    n = np.asarray(concentrations, dtype=float).reshape(len(species), nv) if len(species) else np.zeros((0, nv))

    if phi_ref is None:
        rhs = env.charge * m * (z @ n) + fixed + extra
        A, b = fem.apply_dirichlet(S, rhs, dofs, vals, symmetric=True)
        return LUFactor(A).solve(b)

    if T is None:
        raise ValueError("nonlinear Poisson needs the temperature")
    vt = env.thermal_voltage(T)
    phi_ref = np.asarray(phi_ref, dtype=float)
    phi = phi_ref.copy()
    phi[dofs] = vals
    free = np.ones(nv, dtype=bool)
    free[dofs] = False

    def residual(ph):
        e = np.exp(np.clip(-z[:, None] * (ph - phi_ref)[None] / vt[None], -700, 700))
        rho = env.charge * m * np.einsum("s,sv,sv->v", z, n, e)
        r = S @ ph - rho - fixed - extra
        r[~free] = 0.0
        drho = env.charge * m * np.einsum("s,sv,sv->v", -z * z, n, e) / vt
        return r, drho

    r, drho = residual(phi)
    rnorm = np.linalg.norm(r)
    scale = max(np.linalg.norm(S @ phi), np.linalg.norm(env.charge * m * (np.abs(z) @ n)), 1e-300)
    for it in range(max_newton):
        if rnorm <= tol * scale:
            break
        J = (S - scipy.sparse.diags(drho)).tocsr()
        J, rhs = fem.apply_dirichlet(J, -r, dofs, np.zeros(len(dofs)), symmetric=True)
        dphi = LUFactor(J).solve(rhs)
        step = 1.0
        while True:
            trial = phi + step * dphi
            rt, dt_ = residual(trial)
            if np.linalg.norm(rt) < (1 - 1e-4 * step) * rnorm or step < 1e-4:
                break
            step *= 0.5
        phi, r, drho = trial, rt, dt_
        rnorm = np.linalg.norm(r)
    else:
        if rnorm > 1e3 * tol * scale:
            logger.warning("nonlinear Poisson stopped at residual %.3e", rnorm / scale)
    return phi


def electric_field(mesh: Mesh, phi, geometry=None):
    """E = -grad(phi), elementwise constant (nt, 3)."""
    g, _ = geometry if geometry is not None else fem.tet_geometry(mesh.vertices, mesh.tets)
    return -np.einsum("eid,ei->ed", g, np.asarray(phi)[mesh.tets])


# ---------------------------------------------------------------- Slotboom


def vertex_potentials(species: Species, phi, T, T_ref, env: ElectrostaticEnvironment):
    """Electrostatic exponent psi = -z phi/V_T(T) and Slotboom Psi = psi - ln(T/T_ref)."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise DomainError("nonpositive temperature in Slotboom transformation")
    psi = -species.valence * np.asarray(phi, dtype=float) / env.thermal_voltage(T)
    Psi = psi - np.log(T / T_ref)
    return psi, Psi


def compute_slotboom(mesh: Mesh, phi, T, species: Species, T_ref, env: ElectrostaticEnvironment | None = None):
    """Per-element Psi|_K = -[q z phi_K/(k_B H_K(T)) + ln(T_K/T_ref)] and per-vertex Psi_I."""
    env = env or ElectrostaticEnvironment(permittivity=1.0)
    phi = np.asarray(phi, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise DomainError("nonpositive temperature in Slotboom transformation")
    Tk = T[mesh.tets]
    H = fem.harmonic_average_element(Tk)
    phi_k = phi[mesh.tets].mean(axis=1)
    psi_el = -(species.valence * phi_k / env.thermal_voltage(H) + np.log(Tk.mean(axis=1) / T_ref))
    _, psi_v = vertex_potentials(species, phi, T, T_ref, env)
    return SlotboomData(psi_el, psi_v, float(T_ref))


def _check_psi(Psi):
    amax = float(np.max(np.abs(Psi))) if np.size(Psi) else 0.0
    if not np.isfinite(amax) or amax > PSI_LIMIT:
        raise RescalingError(f"|Psi| = {amax:.3g} exceeds the rescaling guard {PSI_LIMIT}")


def column_rescale(K, psi_vertex):
    """K^n = K diag(exp(-Psi))."""
    Psi = np.asarray(psi_vertex, dtype=float)
    _check_psi(Psi)
    return as_csr(as_csr(K) @ scipy.sparse.diags(np.exp(-Psi)))


# ---------------------------------------------------------------- EAFE assembly


@dataclass
class EAFEGeometry:
    """Mesh quantities reused by every EAFE assembly on a fixed mesh."""

    rows: np.ndarray
    cols: np.ndarray
    stiff: np.ndarray  # S_ij = int grad l_i . grad l_j  = -omega_ij (off-diagonal)
    mass: np.ndarray  # lumped mass per vertex
    geometry: tuple
    n: int

    @classmethod
    def build(cls, mesh: Mesh):
        geometry = fem.tet_geometry(mesh.vertices, mesh.tets)
        S = fem.p1_stiffness(mesh, geometry=geometry).tocoo()
        d = np.zeros(mesh.n_vertices)
        on = S.row == S.col
        d[S.row[on]] = S.data[on]
        off = ~on
        r, c, v = S.row[off], S.col[off], S.data[off].copy()
        # edge coefficients at roundoff level (right-angle configurations) are exact zeros
        v[np.abs(v) <= 1e-12 * np.sqrt(d[r] * d[c])] = 0.0
        keep = v != 0.0
        order = np.lexsort((c[keep], r[keep]))
        return cls(r[keep][order], c[keep][order], v[keep][order],
                   fem.lumped_mass(mesh, geometry=geometry), geometry, mesh.n_vertices)


def _convection_local(mesh, geometry, u):
    """Local matrices of -int lambda_j u . grad(lambda_i) for P1 vertex velocity u."""
    g, vol = geometry
    uk = np.asarray(u, dtype=float)[mesh.tets]  # (nt, 4, 3)
    w = (uk.sum(axis=1, keepdims=True) + uk) * (vol / 20.0)[:, None, None]  # int lambda_j u
    return -np.einsum("eid,ejd->eij", g, w)


def convection_matrix(mesh: Mesh, u, geometry=None):
    geometry = geometry or fem.tet_geometry(mesh.vertices, mesh.tets)
    return fem.scatter(mesh.tets, mesh.tets, _convection_local(mesh, geometry, u), (mesh.n_vertices,) * 2)


def eafe_operator(eg: EAFEGeometry, D, psi):
    """Steady EAFE operator acting on n (rescaled form, no mass).

    Off-diagonal (i, j): -omega_ij D_j B(psi_j - psi_i); diagonal so that every
    column sums to zero.
    """
    D = np.asarray(D, dtype=float)
    psi = np.asarray(psi, dtype=float)
    vals = eg.stiff * D[eg.cols] * fem.bernoulli(psi[eg.cols] - psi[eg.rows])
    diag = -np.bincount(eg.cols, weights=vals, minlength=eg.n)
    rows = np.concatenate([eg.rows, np.arange(eg.n)])
    cols = np.concatenate([eg.cols, np.arange(eg.n)])
    return as_csr(scipy.sparse.coo_matrix((np.concatenate([vals, diag]), (rows, cols)), shape=(eg.n, eg.n)))


def slotboom_operator(eg: EAFEGeometry, D, Psi):
    """Steady EAFE operator acting on n~ = n e^-Psi (symmetric form).

    Off-diagonal (i, j): -omega_ij H_ij with H_ij the harmonic average along the
    edge of g = D e^Psi, H_ij = g_j B(ln g_j - ln g_i).
    """
    D = np.asarray(D, dtype=float)
    Psi = np.asarray(Psi, dtype=float)
    _check_psi(Psi)
    lng = np.log(D) + Psi
    H = np.exp(lng[eg.cols]) * fem.bernoulli(lng[eg.cols] - lng[eg.rows])
    vals = eg.stiff * H
    diag = -np.bincount(eg.rows, weights=vals, minlength=eg.n)
    rows = np.concatenate([eg.rows, np.arange(eg.n)])
    cols = np.concatenate([eg.cols, np.arange(eg.n)])
    return as_csr(scipy.sparse.coo_matrix((np.concatenate([vals, diag]), (rows, cols)), shape=(eg.n, eg.n)))


def assemble_np_eafe(mesh: Mesh, species: Species, phi, T, u, dt, n_old, T_ref,
                     env: ElectrostaticEnvironment | None = None, eafe: EAFEGeometry | None = None):
    """Backward-Euler system in the Slotboom variable.

    Returns ``(K, F, Psi)`` with K n~ = F, n = n~ e^Psi.  ``dt = inf`` gives the
    steady system.  ``u`` may be None (no convection).
    """
    env = env or ElectrostaticEnvironment(permittivity=1.0)
    eg = eafe or EAFEGeometry.build(mesh)
    D = einstein_diffusivity(species, T, env)
    _, Psi = vertex_potentials(species, phi, T, T_ref, env)
    K = slotboom_operator(eg, D, Psi)
    eP = np.exp(Psi)
    if u is not None and np.any(np.asarray(u) != 0):
        K = K + convection_matrix(mesh, u, eg.geometry) @ scipy.sparse.diags(eP)
    F = np.zeros(mesh.n_vertices)
    if np.isfinite(dt):
        K = K + scipy.sparse.diags(eg.mass * eP / dt)
        F = eg.mass * np.asarray(n_old, dtype=float) / dt
    return as_csr(K), F, Psi


def assemble_np_rescaled(mesh: Mesh, species: Species, phi, T, u, dt, n_old, T_ref,
                         env: ElectrostaticEnvironment | None = None, eafe: EAFEGeometry | None = None):
    """The same system written directly for n (the column-rescaled form)."""
    env = env or ElectrostaticEnvironment(permittivity=1.0)
    eg = eafe or EAFEGeometry.build(mesh)
    D = einstein_diffusivity(species, T, env)
    psi, Psi = vertex_potentials(species, phi, T, T_ref, env)
    _check_psi(Psi)
    K = eafe_operator(eg, D, psi)
    if u is not None and np.any(np.asarray(u) != 0):
        K = K + convection_matrix(mesh, u, eg.geometry)
    F = np.zeros(mesh.n_vertices)
    if np.isfinite(dt):
        K = K + scipy.sparse.diags(eg.mass / dt)
        F = eg.mass * np.asarray(n_old, dtype=float) / dt
    return as_csr(K), F


# ---------------------------------------------------------------- time stages


TRBDF2_GAMMA = 2.0 - math.sqrt(2.0)


def stage_plan(scheme, dt):
    """Linear BE-type stages (dt_eff, base weights, explicit weight) for one step.

    Each stage solves (M/dt_eff + A) y = M b/dt_eff - w A y_prev where b is a
    combination of previous stage values.
    """
    if scheme == "be":
        return [(dt, {"k": 1.0}, 0.0)]
    if scheme == "tr":
        return [(dt / 2.0, {"k": 1.0}, 1.0)]
    if scheme == "trbdf2":
        g = TRBDF2_GAMMA
        g2 = (1.0 - g) / (2.0 - g)
        c1 = 1.0 / (g * (2.0 - g))
        c0 = (1.0 - g) ** 2 / (g * (2.0 - g))
        return [(g * dt / 2.0, {"k": 1.0}, 1.0), (g2 * dt, {"s1": c1, "k": -c0}, 0.0)]
    raise ValueError(f"unknown time scheme {scheme!r}")


def time_stepped_solve(operator, mass, y_old, dt, scheme, dirichlet=(None, None), lift=True, source=None):
    """Advance M y' + A y = f by one step of the given scheme (f constant in time).

    ``operator`` is the steady matrix A, ``mass`` the lumped mass vector.  A
    steady solve is requested with dt = inf.
    """
    dofs, vals = dirichlet
    if dofs is None:
        dofs, vals = np.zeros(0, dtype=np.int64), np.zeros(0)
    A = as_csr(operator)
    y_old = np.asarray(y_old, dtype=float)
    f = np.zeros(len(y_old)) if source is None else np.asarray(source, dtype=float)
    if not np.isfinite(dt):
        M, b = fem.apply_dirichlet(A, f, dofs, vals, symmetric=lift)
        return LUFactor(M).solve(b)
    states = {"k": y_old}
    y = y_old
    for dt_eff, base, w in stage_plan(scheme, dt):
        b0 = sum(c * states[key] for key, c in base.items())
        rhs = mass * b0 / dt_eff + f
        if w:
            rhs = rhs - w * (A @ y)
        M = A + scipy.sparse.diags(mass / dt_eff)
        M, rhs = fem.apply_dirichlet(M, rhs, dofs, vals, symmetric=lift)
        y = LUFactor(M).solve(rhs)
        states["s1"] = y
    return y


def species_dirichlet(mesh: Mesh, species: Species):
    return _dirichlet_nodes(mesh, dict(species.dirichlet))


def solve_nernst_planck(mesh, species, phi, T, u, dt, n_old, T_ref, env=None, eafe=None, scheme="be",
                        dirichlet=None):
    """One time step (or steady solve) of the Nernst-Planck equation for n."""
    env = env or ElectrostaticEnvironment(permittivity=1.0)
    eg = eafe or EAFEGeometry.build(mesh)
    K, _ = assemble_np_rescaled(mesh, species, phi, T, u, np.inf, n_old, T_ref, env, eg)
    if dirichlet is None:
        dirichlet = species_dirichlet(mesh, species)
    return time_stepped_solve(K, eg.mass, n_old, dt, scheme, dirichlet)


# ---------------------------------------------------------------- inner cycle


def convergence_norm(U_new, U_old):
    """2-norm of the componentwise difference of two solution vectors."""
    return float(np.linalg.norm(np.asarray(U_new, dtype=float) - np.asarray(U_old, dtype=float)))


@dataclass
class InnerResult:
    n: np.ndarray  # (n_species, nv)
    phi: np.ndarray
    T: np.ndarray
    iterations: int
    history: list


@dataclass
class PNPProblem:
    """Thermal velocity-extended PNP data on one (usually nondimensional) mesh."""

    mesh: Mesh
    species: Sequence[Species]
    env: ElectrostaticEnvironment
    phi_bc: Mapping[str, float]
    T_ref: float
    T_scale: float = 1.0  # temperature scale used in the convergence vector
    n_scale: float = 1.0
    phi_scale: float = 1.0
    species_order: Sequence[int] | None = None
    _eafe: EAFEGeometry | None = field(default=None, repr=False)

    @property
    def eafe(self):
        if self._eafe is None:
            self._eafe = EAFEGeometry.build(self.mesh)
        return self._eafe

    def pack(self, n, phi, T):
        return np.concatenate([np.ravel(n) / self.n_scale, np.ravel(phi) / self.phi_scale,
                               np.ravel(T) / self.T_scale])


def tpnp_inner_cycle(problem: PNPProblem, n_old, phi_old, T_old, u, dt, scheme="be", toll=1e-3,
                     max_iter=100, heat: Callable | None = None, on_iteration: Callable | None = None):
    """Gummel map: nonlinear Poisson -> species -> heat until the scaled
    iterate difference falls below ``toll``."""
    mesh = problem.mesh
    eg = problem.eafe
    n_old = np.asarray(n_old, dtype=float).reshape(len(problem.species), -1)
    n = n_old.copy()
    phi = np.asarray(phi_old, dtype=float).copy()
    T = np.asarray(T_old, dtype=float).copy()
    order = problem.species_order or range(len(problem.species))
    diri = [species_dirichlet(mesh, s) for s in problem.species]
    stiffness = None
    history = []
    U = problem.pack(n, phi, T)
    for j in range(1, max_iter + 1):
        if stiffness is None:
            stiffness = fem.p1_stiffness(mesh, geometry=eg.geometry)
        phi = solve_poisson(mesh, problem.env, problem.species, n, problem.phi_bc, T=T, phi_ref=phi,
                            geometry=eg.geometry, stiffness=stiffness, mass=eg.mass)
        for i in order:
            n[i] = solve_nernst_planck(mesh, problem.species[i], phi, T, u, dt, n_old[i], problem.T_ref,
                                       problem.env, eg, scheme, diri[i])
        if heat is not None:
            T = heat(T_old, dt)
        U_new = problem.pack(n, phi, T)
        crit = convergence_norm(U_new, U)
        history.append(crit)
        if on_iteration is not None:
            on_iteration(j, crit)
        U = U_new
        if np.any(n <= 0):
            logger.debug("nonpositive concentration at Gummel iteration %d (min %.3e)", j, n.min())
        if crit < toll:
            return InnerResult(n, phi, T, j, history)
    raise GummelDivergenceError(f"Gummel inner cycle did not reach toll={toll} in {max_iter} iterations",
                                history)
