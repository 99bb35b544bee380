import math
from dataclasses import replace

import numpy as np
import pytest

from ionchannel import coupling, electrodiffusion as ed
from ionchannel.config import SCENARIOS, SpeciesConfig, preset
from ionchannel.errors import ConfigError, GummelDivergenceError

from oracles import be_decay, tr_decay, trbdf2_decay


def coarse(name, steps=2, dt=1e-9, resolution=0.5e-9, **fluid):
    cfg = preset(name)
    g = replace(cfg.geometry, resolution=resolution if cfg.geometry.kind == "block" else cfg.geometry.resolution)
    cfg = cfg.replace(geometry=g, time=replace(cfg.time, steps=steps, t_final=max(steps, 1) * dt),
                      output=replace(cfg.output, every=1, n_samples=21))
    if fluid:
        cfg = cfg.replace(fluid=replace(cfg.fluid, **fluid))
    return cfg


# ---------------------------------------------------------------- time stepping


def test_time_combine_examples():
    assert coupling.time_combine("be", -1.0, 1.0, 0.1) == pytest.approx(1 / 1.1, rel=1e-15)
    assert coupling.time_combine("tr", -1.0, 1.0, 0.1) == pytest.approx(0.95 / 1.05, rel=1e-15)
    assert coupling.time_combine("trbdf2", -1.0, 1.0, 0.1) == pytest.approx(trbdf2_decay(1.0, 0.1), rel=1e-14)


@pytest.mark.parametrize("lam", [-1.0, -7.5, 0.3])
def test_time_combine_matches_oracles(lam):
    for scheme, oracle in (("be", be_decay), ("tr", tr_decay), ("trbdf2", trbdf2_decay)):
        assert coupling.time_combine(scheme, lam, 1.0, 0.05) == pytest.approx(oracle(-lam, 0.05), rel=1e-14)


def _global_error(scheme, n):
    y = 1.0
    for _ in range(n):
        y = coupling.time_combine(scheme, -1.0, y, 1.0 / n)
    return abs(y - math.exp(-1.0))


@pytest.mark.parametrize("scheme, order", [("be", 1), ("tr", 2), ("trbdf2", 2)])
def test_observed_order(scheme, order):
    e = [_global_error(scheme, n) for n in (10, 20, 40)]
    obs = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    assert np.all(np.abs(obs - order) < 0.1), obs


def test_time_combine_system():
    A = np.array([[-2.0, 1.0], [1.0, -2.0]])
    y = coupling.time_combine("trbdf2", A, [1.0, 0.0], 0.01)
    assert y.shape == (2,)
    ref = np.linalg.solve(np.eye(2) - 0.01 * A, [1.0, 0.0])
    assert np.allclose(y, ref, atol=1e-3)


def test_unknown_scheme():
    with pytest.raises(ConfigError):
        coupling.time_combine("rk4", -1.0, 1.0, 0.1)


# ---------------------------------------------------------------- driver


def test_zero_steps_returns_initial_state(tmp_path):
    cfg = coarse("sez1", steps=0)
    res = coupling.run_simulation(cfg, tmp_path)
    assert len(res.states) == 1 and res.states[0].t == 0.0
    assert res.log.rows == []


def _equilibrium_config():
    cfg = coarse("sez1", steps=1)
    # a neutral cation/anion pair at uniform concentration carries no charge
    k, na = cfg.species
    species = (SpeciesConfig(k.name, 1, k.mobility, 1e25, 1e25, 1e25),
               SpeciesConfig("Cl-", -1, na.mobility, 1e25, 1e25, 1e25))
    return cfg.replace(species=species,
                       electro=replace(cfg.electro, phi_side_a=0.0, phi_side_b=0.0),
                       fluid=replace(cfg.fluid, pressure_side_a=0.0, pressure_side_b=0.0))


def test_equilibrium_is_fixed_point():
    cfg = _equilibrium_config()
    sim = coupling.Simulation(cfg)
    s0 = sim.initial_state()
    s1 = sim.advance(s0)
    sc = sim.scales
    old = np.concatenate([s0.n.ravel() / sc.n0, s0.phi / sc.V_th])
    new = np.concatenate([s1.n.ravel() / sc.n0, s1.phi / sc.V_th])
    assert ed.convergence_norm(new, old) <= cfg.solver.toll
    assert np.max(np.abs(s1.u)) < 1e-12
    assert s1.t == pytest.approx(1e-9)


def test_positivity_without_flow():
    cfg = coarse("sez2_case2", steps=4, enabled=False)
    res = coupling.run_simulation(cfg)
    for st in res.states:
        st.check()
        assert np.all(st.n > 0)


def test_frozen_velocity_contract(monkeypatch):
    cfg = coarse("sez1", steps=2)
    sim = coupling.Simulation(cfg)
    seen = []
    real = ed.tpnp_inner_cycle

    def spy(problem, n, phi, T, u, *args, **kw):
        seen.append(None if u is None else np.array(u))
        return real(problem, n, phi, T, u, *args, **kw)

    monkeypatch.setattr(coupling.ed, "tpnp_inner_cycle", spy)
    st = sim.initial_state()
    prev = []
    for k in (1, 2):
        prev.append(np.asarray(st.u)[: st.mesh.n_vertices] / sim.scales.u0)
        st = sim.advance(st, k)
    assert len(seen) == 2
    assert np.array_equal(seen[0], prev[0]) and np.all(seen[0] == 0)
    assert np.array_equal(seen[1], prev[1]) and np.any(seen[1] != 0)


def test_scheme_consistency():
    """BE, TR and TR-BDF2 approach each other as dt shrinks."""
    gaps = []
    for steps in (2, 4):
        finals = {}
        for scheme in ("be", "tr", "trbdf2"):
            cfg = coarse("sez1", steps=steps, dt=4e-9 / steps, enabled=False)
            cfg = cfg.replace(time=replace(cfg.time, scheme=scheme))
            finals[scheme] = coupling.run_simulation(cfg, keep_states=False).states[-1].n
        scale = np.max(np.abs(finals["be"]))
        gaps.append(max(np.max(np.abs(finals[s] - finals["trbdf2"])) for s in ("be", "tr")) / scale)
    assert gaps[1] < 0.75 * gaps[0], gaps


def test_run_is_bitwise_deterministic(tmp_path):
    cfg = coarse("sez1", steps=2)
    a = coupling.run_simulation(cfg, tmp_path / "a")
    b = coupling.run_simulation(cfg, tmp_path / "b")
    names = sorted(p.name for p in a.files)
    assert names == sorted(p.name for p in b.files)
    assert "convergence.csv" in names and "linecut_00002.csv" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("name", SCENARIOS)
def test_every_preset_takes_a_step(name):
    cfg = coarse(name, steps=1)
    res = coupling.run_simulation(cfg)
    st = res.states[-1]
    st.check()
    assert np.all(np.isfinite(st.u)) and np.all(np.isfinite(st.p))
    if preset(name).mechanics.enabled:
        assert st.d_channel is not None and np.any(st.d_channel != 0)


def test_divergence_dumps_last_state(tmp_path):
    cfg = coarse("sez1", steps=1)
    cfg = cfg.replace(solver=replace(cfg.solver, toll=1e-300, max_gummel=2))
    with pytest.raises(GummelDivergenceError) as err:
        coupling.run_simulation(cfg, tmp_path)
    assert err.value.step == 1 and err.value.state.t == 0.0
    assert (tmp_path / "failed_step_00001.csv").exists()
    assert (tmp_path / "convergence.csv").exists()
