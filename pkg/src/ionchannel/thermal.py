"""Transient heat conduction in the electrolyte (no convective transport)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import fem
from .electrodiffusion import _dirichlet_nodes, time_stepped_solve
from .errors import DomainError, ModelBreakdownError
from .mesh import Mesh


@dataclass(frozen=True)
class ThermalProperties:
    density: float = 1000.0  # kg m^-3
    specific_heat: float = 4186.0  # J kg^-1 K^-1
    conductivity: float = 0.6  # W m^-1 K^-1
    q_heat: float = 0.0  # W m^-3

    def __post_init__(self):
        if not (self.specific_heat > 0 and self.conductivity > 0 and self.density > 0):
            raise DomainError("density, specific heat and conductivity must be positive")


class HeatSolver:
    """Lumped-mass P1 heat equation rho c T_t - div(k grad T) = Q on a fixed mesh."""

    def __init__(self, mesh: Mesh, props: ThermalProperties, bcs: Mapping[str, float], geometry=None):
        self.mesh = mesh
        self.props = props
        geometry = geometry or fem.tet_geometry(mesh.vertices, mesh.tets)
        self.K = props.conductivity * fem.p1_stiffness(mesh, geometry=geometry)
        m = fem.lumped_mass(mesh, geometry=geometry)
        self.mass = props.density * props.specific_heat * m
        self.source = props.q_heat * m
        self.dirichlet = _dirichlet_nodes(mesh, bcs)

    def step(self, T_old, dt, scheme="be"):
        T_old = np.asarray(T_old, dtype=float)
        if np.any(T_old <= 0):
            raise DomainError("initial temperature must be positive")
        T = time_stepped_solve(self.K, self.mass, T_old, dt, scheme, self.dirichlet, source=self.source)
        if np.any(T <= 0):
            raise ModelBreakdownError(f"negative temperature {T.min():.3e} K produced by the heat solve")
        return T


def solve_heat(mesh: Mesh, props: ThermalProperties, bcs: Mapping[str, float], T_old, dt, scheme="be"):
    """One BE (or TR / TR-BDF2) step; ``dt = inf`` gives the steady profile."""
    return HeatSolver(mesh, props, bcs).step(T_old, dt, scheme)
