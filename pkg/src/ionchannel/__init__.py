"""Finite element simulator for ion transport, flow, heat and wall deformation in nanochannels."""

from .config import SimulationConfig, load_config, parse_config, preset, serialize
from .coupling import Simulation, SolutionState, advance_step, run_simulation, time_combine
from .mesh import ChannelGeometry, Mesh, build_channel_mesh, build_cylinder_mesh, deform_mesh, extract_region

__version__ = "0.1.0"

__all__ = [
    "ChannelGeometry", "Mesh", "Simulation", "SimulationConfig", "SolutionState", "advance_step",
    "build_channel_mesh", "build_cylinder_mesh", "deform_mesh", "extract_region", "load_config",
    "parse_config", "preset", "run_simulation", "serialize", "time_combine",
]
