"""Time loop: mechanics -> mesh deformation -> thermal-PNP Gummel cycle -> Stokes.

PNP runs on the channel in nondimensional form: lengths over the channel
length L0, concentrations over the largest boundary/initial value n0,
potentials over V_th = k_B T_ref/q and time over t0 = L0^2/D0 with D0 the
first species' diffusivity at T_ref.  In these units the Poisson equation reads
-div(lambda^2 grad phi) = sum z n with lambda^2 = eps V_th/(q n0 L0^2), which the
electrodiffusion routines solve with charge 1 and k_B = 1/T_ref.  Heat and
Stokes run in SI on the same channel mesh; mechanics runs on the whole block.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import elasticity, electrodiffusion as ed, stokes, thermal
from .config import SimulationConfig
from .constants import BOLTZMANN, ELEMENTARY_CHARGE, VACUUM_PERMITTIVITY
from .errors import ConfigError, GummelDivergenceError
from .mesh import ChannelGeometry, Mesh, build_channel_mesh, build_cylinder_mesh, deform_mesh, extract_region
from .output import ConvergenceLog, export_vtk, write_line_cut

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- time stepping


def time_combine(scheme, f, y0, dt, solve_stage=None):
    """One step of y' = f(y) for linear f given as a matrix or scalar.

    ``solve_stage(dt_eff, rhs)`` solves (I/dt_eff - A) y = rhs; by default the
    scalar/dense case is handled directly.  Used for the scalar ODE oracles and
    mirrors the stage plan shared by the species and heat solvers.
    """
    A = np.atleast_2d(np.asarray(f, dtype=float))
    y = np.atleast_1d(np.asarray(y0, dtype=float))
    n = len(y)
    eye = np.eye(n)
    try:
        plan = ed.stage_plan(scheme, dt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if solve_stage is None:
        def solve_stage(dt_eff, rhs):
            return np.linalg.solve(eye / dt_eff - A, rhs)
    states = {"k": y}
    cur = y
    for dt_eff, base, w in plan:
        b0 = sum(c * states[key] for key, c in base.items())
        rhs = b0 / dt_eff + w * (A @ cur)
        cur = solve_stage(dt_eff, rhs)
        states["s1"] = cur
    return cur if np.ndim(y0) else float(cur[0])


# ---------------------------------------------------------------- state


@dataclass
class SolutionState:
    t: float
    n: np.ndarray  # (n_species, nv) m^-3
    phi: np.ndarray  # V
    T: np.ndarray  # K
    u: np.ndarray  # (n_velocity_dofs, 3) m/s (P2 dofs for Taylor-Hood)
    p: np.ndarray  # Pa at vertices
    d: np.ndarray | None  # block displacement (m)
    mesh: Mesh  # deformed channel mesh
    species_names: tuple = ()
    d_channel: np.ndarray | None = None
    gummel_iterations: int = 0
    gummel_history: list = field(default_factory=list)

    def check(self):
        if self.n.size and np.any(self.n <= 0):
            raise ValueError("state has nonpositive concentrations")
        if np.any(self.T <= 0):
            raise ValueError("state has nonpositive temperatures")


@dataclass(frozen=True)
class Scales:
    L0: float
    n0: float
    V_th: float
    D0: float
    T_ref: float

    @property
    def t0(self):
        return self.L0 ** 2 / self.D0

    @property
    def u0(self):
        return self.L0 / self.t0


class Simulation:
    """Set up meshes, scaled PNP data and solvers from a validated config."""

    def __init__(self, config: SimulationConfig):
        self.config = config
        g = config.geometry
        if g.kind == "block":
            self.block = build_channel_mesh(ChannelGeometry(g.channel_length, g.channel_diameter,
                                                            g.box_half_width, g.resolution))
            self.channel_ref, self.vmap = extract_region(self.block, "Channel")
        else:
            self.block = None
            self.channel_ref = build_cylinder_mesh(g.channel_length, g.channel_diameter, g.resolution)
            self.vmap = np.arange(self.channel_ref.n_vertices)
        th = config.thermal
        self.T_ref = th.T_ref
        self.species_cfg = config.species
        self.names = tuple(s.name for s in config.species)
        self.pnp_on = config.electro.enabled and len(config.species) > 0
        if self.pnp_on:
            n0 = max(max(s.side_a, s.side_b, s.initial) for s in config.species)
            V_th = BOLTZMANN * th.T_ref / ELEMENTARY_CHARGE
            s0 = config.species[0]
            D0 = s0.mobility * V_th / abs(s0.valence)
            self.scales = Scales(g.channel_length, n0, V_th, D0, th.T_ref)
            eps = config.electro.relative_permittivity * VACUUM_PERMITTIVITY
            self.lambda2 = eps * V_th / (ELEMENTARY_CHARGE * n0 * g.channel_length ** 2)
            self.env = ed.ElectrostaticEnvironment(permittivity=self.lambda2, charge=1.0,
                                                   boltzmann=1.0 / th.T_ref)
            # with k_B = 1/T_ref and q = 1 the scaled Einstein relation gives D_i(T_ref)/D0
            self.species = [ed.Species(s.name, s.valence, s.mobility * V_th / D0,
                                       {"SideA": s.side_a / n0, "SideB": s.side_b / n0}, s.initial / n0)
                            for s in config.species]
            self.phi_bc = {"SideA": config.electro.phi_side_a / V_th, "SideB": config.electro.phi_side_b / V_th}
        else:
            self.scales = Scales(g.channel_length, 1.0, 1.0, 1.0, th.T_ref)
        self.fluid = stokes.FluidProperties(config.fluid.density, config.fluid.viscosity)
        self.thermal_props = thermal.ThermalProperties(th.density, th.specific_heat, th.conductivity, th.q_heat)
        self._mesh_key = None
        self._d_cache = None
        self._problem = None
        self._heat = None

    # -- mechanics

    def _materials(self):
        T_ref = self.T_ref
        return {r: elasticity.ElasticMaterial(m.young, m.poisson, (m.alpha,) * 3, T_ref)
                for r, m in self.config.mechanics.materials}

    def displacement(self, T_channel):
        mech = self.config.mechanics
        if not mech.enabled or self.block is None:
            return None
        mats = self._materials()
        thermal_active = any(m.alpha != 0 for _, m in mech.materials)
        if self._d_cache is not None and not thermal_active:
            return self._d_cache
        load = elasticity.MechanicalLoad(
            initial_stress={"Omega2": (mech.gamma, mech.gamma, 0.0, 0.0, 0.0, 0.0)} if mech.gamma else {},
            dirichlet={t: (0.0, 0.0, 0.0) for t in ("SideA", "SideB", "OuterWall")})
        T_block = None
        if thermal_active:
            T_block = np.full(self.block.n_vertices, self.T_ref)
            T_block[self.vmap] = T_channel
        d = elasticity.solve_displacement(self.block, mats, load, T_block, tol=self.config.solver.linear_tol)
        self._d_cache = d
        return d

    def deformed_channel(self, d):
        if d is None:
            return self.channel_ref, None
        deform_mesh(self.block, d)  # inversion check on the whole block
        dc = d[self.vmap]
        return deform_mesh(self.channel_ref, dc), dc

    # -- per-mesh solvers

    def _setup_mesh(self, mesh: Mesh):
        key = id(mesh)
        if key == self._mesh_key:
            return
        self._mesh_key = key
        self._mesh = mesh
        if self.pnp_on:
            scaled = mesh.with_vertices(mesh.vertices / self.scales.L0)
            self._problem = ed.PNPProblem(scaled, self.species, self.env, self.phi_bc, self.T_ref,
                                          T_scale=self.T_ref)
        th = self.config.thermal
        if th.enabled:
            self._heat = thermal.HeatSolver(mesh, self.thermal_props, {"SideA": th.T_side_a, "SideB": th.T_side_b})
        else:
            self._heat = None

    # -- state

    def initial_state(self) -> SolutionState:
        mesh = self.channel_ref
        d = self.displacement(np.full(mesh.n_vertices, self.config.thermal.T_initial))
        mesh, dc = self.deformed_channel(d)
        self._setup_mesh(mesh)
        nv = mesh.n_vertices
        T = np.full(nv, self.config.thermal.T_initial)
        if self.pnp_on:
            n = np.array([np.full(nv, s.initial) for s in self.species_cfg])
            phi_hat = ed.solve_poisson(self._problem.mesh, self.env, self.species, n / self.scales.n0,
                                       self.phi_bc, T=T)
            phi = phi_hat * self.scales.V_th
        else:
            n = np.zeros((0, nv))
            phi = np.zeros(nv)
        nvel = nv if self.config.fluid.discretization == "hfb" else nv + len(mesh.edges())
        return SolutionState(0.0, n, phi, T, np.zeros((nvel, 3)), np.zeros(nv), d, mesh, self.names, dc)

    def stokes_bcs(self):
        f = self.config.fluid
        velocity, stress = {}, {}
        if f.lateral_wall == "noslip":
            velocity["LateralWall"] = (0.0, 0.0, 0.0)
        else:
            stress["LateralWall"] = 0.0
        if f.inlet_velocity:
            velocity["SideA"] = (0.0, 0.0, f.inlet_velocity)
        else:
            stress["SideA"] = f.pressure_side_a
        stress["SideB"] = f.pressure_side_b
        return stokes.StokesBC(velocity=velocity, stress=stress)

    def solve_flow(self, mesh, n, phi, u_old, dt):
        f = self.config.fluid
        body = None
        if f.body_force and self.pnp_on:
            E = ed.electric_field(mesh, phi)
            species = [ed.Species(s.name, s.valence, s.mobility) for s in self.species_cfg]
            body = stokes.electric_body_force(mesh, n, species, E)
        bcs = self.stokes_bcs()
        if f.discretization == "th":
            system = stokes.assemble_taylor_hood(mesh, self.fluid, bcs, body, u_old, dt)
        else:
            system = stokes.assemble_hfb(mesh, self.fluid, bcs, body, u_old, dt, delta=f.delta or None)
        return stokes.solve_stokes(system, f.solver, rho=f.rho or None, tol=self.config.solver.linear_tol)

    def advance(self, state: SolutionState, step_index=0, log: ConvergenceLog | None = None,
                on_iteration=None) -> SolutionState:
        """One time level: mechanics, deformation, inner cycle with u frozen at u^k, Stokes."""
        cfg = self.config
        dt = cfg.time.dt
        d = self.displacement(state.T)
        if d is not None and d is state.d:
            mesh, dc = state.mesh, state.d_channel
        else:
            mesh, dc = self.deformed_channel(d)
        self._setup_mesh(mesh)
        sc = self.scales
        n, phi, T = state.n, state.phi, state.T
        iterations, history = 0, []
        if self.pnp_on:
            nv = mesh.n_vertices
            u_vert = np.asarray(state.u)[:nv] / sc.u0 if cfg.fluid.enabled else None
            dt_hat = dt / sc.t0
            heat = None
            if self._heat is not None:
                def heat(T_old, dt_h, _h=self._heat):
                    return _h.step(T_old, dt_h * sc.t0, cfg.time.scheme)

            def hook(j, crit):
                if log is not None:
                    log.add(step_index, state.t + (0 if math.isinf(dt) else dt), j, crit)
                if on_iteration is not None:
                    on_iteration(j, crit)

            try:
                res = ed.tpnp_inner_cycle(self._problem, n / sc.n0, phi / sc.V_th, T, u_vert, dt_hat,
                                          cfg.time.scheme, cfg.solver.toll, cfg.solver.max_gummel, heat, hook)
            except GummelDivergenceError as exc:
                logger.error("step %d: inner cycle diverged; criterion history %s", step_index, exc.history)
                exc.state = state
                exc.step = step_index
                raise
            n, phi, T = res.n * sc.n0, res.phi * sc.V_th, res.T
            iterations, history = res.iterations, res.history
        elif self._heat is not None:
            T = self._heat.step(T, dt, cfg.time.scheme)
        u, p = state.u, state.p
        if cfg.fluid.enabled:
            sol = self.solve_flow(mesh, n, phi, state.u, dt)
            u, p = sol.u, sol.pressure
            if log is not None:
                log.add(step_index, state.t + (0 if math.isinf(dt) else dt), 0, 0.0, sol.report.iterations,
                        sol.report.final_residual_norm)
        t_new = state.t + (0.0 if math.isinf(dt) else dt)
        new = SolutionState(t_new, n, phi, T, u, p, d, mesh, self.names, dc, iterations, history)
        return new


def advance_step(state: SolutionState, config_or_sim, step_index=0, log=None):
    sim = config_or_sim if isinstance(config_or_sim, Simulation) else Simulation(config_or_sim)
    return sim.advance(state, step_index, log)


@dataclass
class RunResult:
    states: list
    log: ConvergenceLog
    files: list


def run_simulation(config: SimulationConfig, out_dir=None, keep_states=True, progress=None) -> RunResult:
    """Run the configured time loop; writes line cuts, VTK and the convergence log when out_dir is set."""
    sim = Simulation(config)
    state = sim.initial_state()
    log = ConvergenceLog()
    states = [state]
    files = []
    out = Path(out_dir) if out_dir is not None else None
    steps = 1 if config.time.steady else config.time.steps
    every = config.output.every

    def emit(k, st):
        if out is None:
            return
        cut = out / f"linecut_{k:05d}.csv"
        write_line_cut(st, config.output.n_samples, cut, config.scenario)
        files.append(cut)
        if config.output.vtk:
            vtk = out / f"fields_{k:05d}.vtk"
            export_vtk(st, vtk)
            files.append(vtk)

    for k in range(1, steps + 1):
        try:
            state = sim.advance(state, k, log)
        except GummelDivergenceError:
            if out is not None:
                # diagnostic dump of the last good state
                write_line_cut(state, config.output.n_samples, out / f"failed_step_{k:05d}.csv", config.scenario)
                log.write(out / "convergence.csv")
            raise
        if keep_states:
            states.append(state)
        else:
            states[-1:] = [state]
        if progress is not None:
            progress(k, state)
        if k % every == 0 or k == steps:
            emit(k, state)
    if out is not None:
        path = out / "convergence.csv"
        log.write(path)
        files.append(path)
    return RunResult(states, log, files)


def pure_pnp(config: SimulationConfig) -> SimulationConfig:
    """The same scenario without fluid flow (u = 0)."""
    return config.replace(fluid=replace(config.fluid, enabled=False))
