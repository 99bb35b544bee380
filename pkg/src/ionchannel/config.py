"""Scenario configuration: a flat INI-style text format with units.

Values may carry a unit after the number (``mobility = 7.2e-4 cm^2/(V s)``);
they are converted to SI on load and every conversion is logged.  A bare
number is taken to be SI already.  Errors carry the offending line number.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .mesh import REGIONS

logger = logging.getLogger(__name__)

SCENARIOS = ("sez1", "sez2_case1", "sez2_case2", "sez3_def1", "sez3_def2", "hfb_validation")
SCHEMES = ("be", "tr", "trbdf2")

# dimension -> accepted unit spellings -> factor to SI
_UNITS = {
    "length": {"m": 1.0, "cm": 1e-2, "mm": 1e-3, "um": 1e-6, "nm": 1e-9},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9, "ps": 1e-12},
    "concentration": {"m^-3": 1.0, "cm^-3": 1e6},
    "mobility": {"m^2/(V s)": 1.0, "cm^2/(V s)": 1e-4},
    "voltage": {"V": 1.0, "mV": 1e-3},
    "temperature": {"K": 1.0},
    "pressure": {"Pa": 1.0, "N/m^2": 1.0, "N/cm^2": 1e4},
    "viscosity": {"Pa s": 1.0, "N s/m^2": 1.0, "N s/cm^2": 1e4},
    "density": {"kg/m^3": 1.0, "kg/cm^3": 1e6, "g/cm^3": 1e3},
    "velocity": {"m/s": 1.0, "um/s": 1e-6, "nm/s": 1e-9},
    "specific_heat": {"J/(kg K)": 1.0},
    "conductivity": {"W/(m K)": 1.0},
    "power_density": {"W/m^3": 1.0},
    "expansion": {"1/K": 1.0},
    "force_density": {"N/m^3": 1.0, "N/cm^3": 1e6},
    "none": {"": 1.0},
}
_SI_UNIT = {dim: next(u for u, f in units.items() if f == 1.0) for dim, units in _UNITS.items()}


# ---------------------------------------------------------------- schema


@dataclass(frozen=True)
class GeometryConfig:
    kind: str = "block"  # block (channel in a three-region box) or cylinder (channel only)
    channel_length: float = 10e-9
    channel_diameter: float = 2e-9
    box_half_width: float = 2e-9
    resolution: float = 0.5e-9


@dataclass(frozen=True)
class TimeConfig:
    t_final: float = 50e-9
    steps: int = 50
    scheme: str = "be"
    steady: bool = False

    @property
    def dt(self):
        return math.inf if self.steady else self.t_final / self.steps


@dataclass(frozen=True)
class SpeciesConfig:
    name: str
    valence: int
    mobility: float
    side_a: float
    side_b: float
    initial: float


@dataclass(frozen=True)
class ElectroConfig:
    enabled: bool = True
    relative_permittivity: float = 80.0
    phi_side_a: float = 0.02
    phi_side_b: float = 0.0


@dataclass(frozen=True)
class FluidConfig:
    enabled: bool = True
    density: float = 1000.0
    viscosity: float = 1e-3
    pressure_side_a: float = 0.0
    pressure_side_b: float = 0.0
    inlet_velocity: float = 0.0  # axial Dirichlet velocity on SideA when nonzero
    lateral_wall: str = "noslip"  # noslip or free (zero stress)
    discretization: str = "th"
    solver: str = "direct"
    delta: float = 0.0  # 0 selects 12 nu
    rho: float = 0.0  # 0 selects the line-search value
    body_force: bool = True


@dataclass(frozen=True)
class ThermalConfig:
    enabled: bool = True
    T_initial: float = 293.75
    T_side_a: float = 293.75
    T_side_b: float = 293.75
    T_ref: float = 300.0
    density: float = 1000.0
    specific_heat: float = 4186.0
    conductivity: float = 0.6
    q_heat: float = 0.0


@dataclass(frozen=True)
class MaterialConfig:
    young: float
    poisson: float
    alpha: float = 0.0


@dataclass(frozen=True)
class MechanicsConfig:
    enabled: bool = False
    gamma: float = 0.0  # in-plane initial stress in Omega2 (Pa)
    materials: tuple = ()  # ((region, MaterialConfig), ...)


@dataclass(frozen=True)
class SolverConfig:
    toll: float = 1e-3
    max_gummel: int = 100
    linear_tol: float = 1e-10


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    every: int = 10
    n_samples: int = 101
    vtk: bool = True


@dataclass(frozen=True)
class SimulationConfig:
    scenario: str = "custom"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    species: tuple = ()
    electro: ElectroConfig = field(default_factory=ElectroConfig)
    fluid: FluidConfig = field(default_factory=FluidConfig)
    thermal: ThermalConfig = field(default_factory=ThermalConfig)
    mechanics: MechanicsConfig = field(default_factory=MechanicsConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


# section -> key -> (dimension, type, required)
_SCHEMA = {
    "scenario": {"id": ("none", str, True)},
    "geometry": {
        "kind": ("none", str, False),
        "channel_length": ("length", float, True),
        "channel_diameter": ("length", float, True),
        "box_half_width": ("length", float, False),
        "resolution": ("length", float, True),
    },
    "time": {
        "t_final": ("time", float, True),
        "steps": ("none", int, True),
        "scheme": ("none", str, False),
        "steady": ("none", bool, False),
    },
    "species": {
        "valence": ("none", int, True),
        "mobility": ("mobility", float, True),
        "side_a": ("concentration", float, True),
        "side_b": ("concentration", float, True),
        "initial": ("concentration", float, True),
    },
    "electrostatics": {
        "enabled": ("none", bool, False),
        "relative_permittivity": ("none", float, False),
        "phi_side_a": ("voltage", float, True),
        "phi_side_b": ("voltage", float, True),
    },
    "fluid": {
        "enabled": ("none", bool, False),
        "density": ("density", float, True),
        "viscosity": ("viscosity", float, True),
        "pressure_side_a": ("pressure", float, False),
        "pressure_side_b": ("pressure", float, False),
        "inlet_velocity": ("velocity", float, False),
        "lateral_wall": ("none", str, False),
        "discretization": ("none", str, False),
        "solver": ("none", str, False),
        "delta": ("none", float, False),
        "rho": ("none", float, False),
        "body_force": ("none", bool, False),
    },
    "thermal": {
        "enabled": ("none", bool, False),
        "T_initial": ("temperature", float, True),
        "T_side_a": ("temperature", float, True),
        "T_side_b": ("temperature", float, True),
        "T_ref": ("temperature", float, False),
        "density": ("density", float, False),
        "specific_heat": ("specific_heat", float, False),
        "conductivity": ("conductivity", float, False),
        "q_heat": ("power_density", float, False),
    },
    "mechanics": {
        "enabled": ("none", bool, False),
        "gamma": ("pressure", float, False),
    },
    "material": {
        "young": ("pressure", float, True),
        "poisson": ("none", float, True),
        "alpha": ("expansion", float, False),
    },
    "solver": {
        "toll": ("none", float, False),
        "max_gummel": ("none", int, False),
        "linear_tol": ("none", float, False),
    },
    "output": {
        "directory": ("none", str, False),
        "every": ("none", int, False),
        "n_samples": ("none", int, False),
        "vtk": ("none", bool, False),
    },
}
_REQUIRED_SECTIONS = ("scenario", "geometry", "time")

_VALUE = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(.*?)\s*$")


def _parse_bool(text, line):
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}", line)


def _parse_value(key, text, dim, typ, line, path):
    if typ is str:
        return text.strip()
    if typ is bool:
        return _parse_bool(text, line)
    m = _VALUE.match(text)
    if not m:
        raise ConfigError(f"{key}: expected a number, got {text!r}", line, path)
    number, unit = m.group(1), " ".join(m.group(2).split())
    if typ is int:
        if unit:
            raise ConfigError(f"{key}: unexpected unit {unit!r} on an integer", line, path)
        try:
            return int(number)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {number!r}", line, path) from None
    table = _UNITS[dim]
    if unit and unit not in table:
        raise ConfigError(f"{key}: unit {unit!r} does not match dimension {dim} "
                          f"(accepted: {', '.join(u for u in table if u)})", line, path)
    value = float(number) * table[unit or _SI_UNIT[dim]]
    if unit and table[unit] != 1.0:
        logger.info("line %d: %s = %s %s -> %.17g %s", line, key, number, unit, value, _SI_UNIT[dim])
    return value


def _split_section(header):
    parts = header.split(None, 1)
    return parts[0], (parts[1].strip() if len(parts) > 1 else None)


def parse_config(text, path=None) -> SimulationConfig:
    sections = []  # (kind, name, {key: (value, line)}, line)
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno, path)
            kind, name = _split_section(line[1:-1].strip())
            if kind not in _SCHEMA:
                raise ConfigError(f"unknown section [{kind}]", lineno, path)
            if kind in ("species", "material") and not name:
                raise ConfigError(f"section [{kind}] needs a name", lineno, path)
            if kind not in ("species", "material") and name:
                raise ConfigError(f"section [{kind}] takes no name", lineno, path)
            if kind == "material" and name not in REGIONS:
                raise ConfigError(f"unknown region {name!r} (expected one of {', '.join(REGIONS)})", lineno, path)
            for k, n, _, l0 in sections:
                if (k, n) == (kind, name):
                    raise ConfigError(f"duplicate section [{line[1:-1].strip()}] (first at line {l0})", lineno,
                                      path)
            current = (kind, name, {}, lineno)
            sections.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno, path)
        if current is None:
            raise ConfigError("key outside of any section", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        kind = current[0]
        if key not in _SCHEMA[kind]:
            raise ConfigError(f"unknown key {key!r} in [{kind}]", lineno, path)
        if key in current[2]:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        dim, typ, _ = _SCHEMA[kind][key]
        current[2][key] = (_parse_value(key, value, dim, typ, lineno, path), lineno)

    present = {k for k, _, _, _ in sections}
    missing = [s for s in _REQUIRED_SECTIONS if s not in present]
    if missing:
        req = [f"[{s}] {k}" for s in missing for k, (_, _, r) in _SCHEMA[s].items() if r]
        raise ConfigError("missing required sections " + ", ".join(f"[{s}]" for s in missing)
                          + "; required keys: " + ", ".join(req), 1 if not text.strip() else None, path)
    for kind, name, values, lineno in sections:
        need = [k for k, (_, _, r) in _SCHEMA[kind].items() if r and k not in values]
        if need:
            raise ConfigError(f"[{kind}{' ' + name if name else ''}] is missing required keys: "
                              + ", ".join(need), lineno, path)
    return _build(sections, path)


def _vals(values):
    return {k: v for k, (v, _) in values.items()}


def _build(sections, path):
    cfg = {}
    species, materials = [], []
    mech = {}
    for kind, name, values, lineno in sections:
        v = _vals(values)
        if kind == "scenario":
            cfg["scenario"] = v["id"]
        elif kind == "geometry":
            cfg["geometry"] = GeometryConfig(**v)
        elif kind == "time":
            cfg["time"] = TimeConfig(**v)
        elif kind == "species":
            species.append(SpeciesConfig(name=name, **v))
        elif kind == "electrostatics":
            cfg["electro"] = ElectroConfig(**v)
        elif kind == "fluid":
            cfg["fluid"] = FluidConfig(**v)
        elif kind == "thermal":
            cfg["thermal"] = ThermalConfig(**v)
        elif kind == "mechanics":
            mech = v
        elif kind == "material":
            materials.append((name, MaterialConfig(**v)))
        elif kind == "solver":
            cfg["solver"] = SolverConfig(**v)
        elif kind == "output":
            cfg["output"] = OutputConfig(**v)
    cfg["species"] = tuple(species)
    cfg["mechanics"] = MechanicsConfig(materials=tuple(materials), **mech)
    config = SimulationConfig(**cfg)
    validate(config, path)
    return config


def validate(config: SimulationConfig, path=None):
    def bad(msg):
        raise ConfigError(msg, None, path)

    g = config.geometry
    if g.kind not in ("block", "cylinder"):
        bad(f"geometry kind must be block or cylinder, got {g.kind!r}")
    for name in ("channel_length", "channel_diameter", "resolution"):
        if not getattr(g, name) > 0:
            bad(f"geometry {name} must be positive")
    t = config.time
    if t.scheme not in SCHEMES:
        bad(f"unknown time scheme {t.scheme!r} (expected one of {', '.join(SCHEMES)})")
    if t.steps < 0 or not t.t_final > 0:
        bad("time: steps must be >= 0 and t_final > 0")
    if not config.solver.toll > 0:
        bad("solver toll must be positive")
    if config.fluid.discretization not in ("th", "hfb"):
        bad(f"fluid discretization must be th or hfb, got {config.fluid.discretization!r}")
    if config.fluid.lateral_wall not in ("noslip", "free"):
        bad(f"fluid lateral_wall must be noslip or free, got {config.fluid.lateral_wall!r}")
    if config.fluid.solver not in ("direct", "uzawa"):
        bad(f"fluid solver must be direct or uzawa, got {config.fluid.solver!r}")
    names = [s.name for s in config.species]
    if len(set(names)) != len(names):
        bad("duplicate species names")
    for s in config.species:
        if not (s.mobility > 0 and s.side_a > 0 and s.side_b > 0 and s.initial > 0):
            bad(f"species {s.name}: mobility and concentrations must be positive")
    th = config.thermal
    if not (th.T_initial > 0 and th.T_side_a > 0 and th.T_side_b > 0 and th.T_ref > 0):
        bad("temperatures must be positive")
    if config.mechanics.enabled:
        regions = dict(config.mechanics.materials)
        need = REGIONS if g.kind == "block" else ("Channel",)
        missing = [r for r in need if r not in regions]
        if missing:
            bad("mechanics enabled but no material for " + ", ".join(missing))
        for r, m in regions.items():
            if not (m.young > 0 and 0 <= m.poisson < 0.5):
                bad(f"material {r}: need E > 0 and 0 <= poisson < 0.5")
    if config.output.every < 1 or config.output.n_samples < 2:
        bad("output every must be >= 1 and n_samples >= 2")
    return config


def load_config(path) -> SimulationConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc}", None, str(path)) from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------- serialization


def _fmt(value, dim="none"):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        unit = _SI_UNIT[dim]
        return f"{value:.17g}" + (f" {unit}" if unit else "")
    return str(value)


def _emit(lines, header, obj, kind, skip=()):
    lines.append(f"[{header}]")
    for key, (dim, _, _) in _SCHEMA[kind].items():
        if key in skip:
            continue
        lines.append(f"{key} = {_fmt(getattr(obj, key), dim)}")
    lines.append("")


def serialize(config: SimulationConfig) -> str:
    lines = ["[scenario]", f"id = {config.scenario}", ""]
    _emit(lines, "geometry", config.geometry, "geometry")
    _emit(lines, "time", config.time, "time")
    for s in config.species:
        _emit(lines, f"species {s.name}", s, "species")
    el = config.electro
    _emit(lines, "electrostatics", el, "electrostatics")
    _emit(lines, "fluid", config.fluid, "fluid")
    _emit(lines, "thermal", config.thermal, "thermal")
    _emit(lines, "mechanics", config.mechanics, "mechanics")
    for region, m in config.mechanics.materials:
        _emit(lines, f"material {region}", m, "material")
    _emit(lines, "solver", config.solver, "solver")
    _emit(lines, "output", config.output, "output")
    return "\n".join(lines)


def preset(name) -> SimulationConfig:
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r} (expected one of {', '.join(SCENARIOS)})")
    text = resources.files("ionchannel").joinpath("presets").joinpath(f"{name}.ini").read_text()
    return parse_config(text, f"<preset {name}>")
