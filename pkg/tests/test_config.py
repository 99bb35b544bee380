import logging

import pytest
from hypothesis import given, settings, strategies as st

from ionchannel import cli
from ionchannel.config import (SCENARIOS, GeometryConfig, SimulationConfig, TimeConfig, load_config,
                               parse_config, preset, serialize)
from ionchannel.errors import ConfigError

MINIMAL = """\
[scenario]
id = tiny
[geometry]
channel_length = 10 nm
channel_diameter = 2 nm
resolution = 0.5 nm
[time]
t_final = 5 ns
steps = 5
"""


def test_sez1_mobility_conversion():
    cfg = preset("sez1")
    k = next(s for s in cfg.species if s.name == "K+")
    assert k.mobility == pytest.approx(7.2e-8, rel=1e-15)
    assert k.side_a == pytest.approx(2.41e26, rel=1e-15)


def test_conversions_are_logged(caplog):
    with caplog.at_level(logging.INFO, logger="ionchannel.config"):
        parse_config(MINIMAL)
    assert any("10 nm" in r.getMessage() for r in caplog.records)


def test_empty_file_lists_required_keys():
    with pytest.raises(ConfigError) as err:
        parse_config("")
    msg = str(err.value)
    for key in ("[scenario] id", "[geometry] channel_length", "[time] t_final"):
        assert key in msg


def test_toll_default():
    assert parse_config(MINIMAL).solver.toll == 1e-3


@pytest.mark.parametrize("extra, line", [
    ("[time]\nsteps = 1\n", 10),
    ("[solver]\nbogus = 1\n", 11),
    ("[fluid]\ndensity = 1 kg\nviscosity = 1e-3\n", 11),
    ("[output]\nevery = 2.5\n", 11),
    ("[species K]\nvalence = 1\n", 10),
    ("[nonsense]\n", 10),
    ("just a line\n", 10),
])
def test_errors_carry_line_numbers(extra, line):
    with pytest.raises(ConfigError) as err:
        parse_config(MINIMAL + extra, "case.ini")
    assert err.value.line == line
    assert str(err.value).startswith(f"case.ini:{err.value.line}:")


def test_unit_mismatch_message():
    with pytest.raises(ConfigError, match="does not match dimension length"):
        parse_config(MINIMAL.replace("10 nm", "10 K"))


def test_semantic_validation():
    with pytest.raises(ConfigError, match="scheme"):
        parse_config(MINIMAL.replace("steps = 5\n", "steps = 5\nscheme = rk4\n"))


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.ini")


@pytest.mark.parametrize("name", SCENARIOS)
def test_preset_round_trip(name, tmp_path):
    cfg = preset(name)
    path = tmp_path / f"{name}.ini"
    path.write_text(serialize(cfg))
    assert load_config(path) == cfg


def test_preset_values():
    d1 = dict(preset("sez3_def1").mechanics.materials)
    assert preset("sez3_def1").mechanics.gamma == pytest.approx(-1e11)
    assert preset("sez3_def2").mechanics.gamma == pytest.approx(-2e11)
    assert "Omega2" in d1
    assert preset("sez2_case2").thermal.T_side_b == 373.75
    assert preset("sez2_case1").thermal.T_side_b == 343.75
    s1 = preset("sez1").electro
    assert (s1.phi_side_a, s1.phi_side_b) == (0.02, 0.0)
    assert preset("sez3_def2").electro.phi_side_a == 0.2
    hv = preset("hfb_validation").fluid
    assert hv.inlet_velocity == pytest.approx(1e-7) and hv.pressure_side_b == 2e-4


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown scenario"):
        preset("sez4")


finite = st.floats(min_value=1e-12, max_value=1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(length=finite, diameter=finite, res=finite, t_final=finite, steps=st.integers(0, 10 ** 6),
       scheme=st.sampled_from(["be", "tr", "trbdf2"]))
def test_round_trip_property(length, diameter, res, t_final, steps, scheme):
    cfg = SimulationConfig(scenario="p", geometry=GeometryConfig("cylinder", length, diameter, 1.0, res),
                           time=TimeConfig(t_final, steps, scheme))
    assert parse_config(serialize(cfg)) == cfg


# ---------------------------------------------------------------- CLI


def test_cli_overrides():
    args = cli.build_parser().parse_args(["--scenario", "sez1", "--resolution", "5e-10", "--dt", "2e-9",
                                          "--scheme", "tr", "--stokes", "hfb", "--no-flow"])
    cfg = cli.resolve(args)
    assert cfg.geometry.resolution == 5e-10
    assert cfg.time.steps == 25 and cfg.time.scheme == "tr"
    assert cfg.fluid.discretization == "hfb" and not cfg.fluid.enabled


def test_cli_exclusive_sources(capsys):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["--scenario", "sez1", "--config", "x.ini"])


def test_cli_dump_config(capsys):
    assert cli.main(["--scenario", "hfb_validation", "--dump-config"]) == 0
    assert parse_config(capsys.readouterr().out) == preset("hfb_validation")


def test_cli_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(MINIMAL + "[solver]\ntoll = -1\n")
    assert cli.main(["--config", str(bad)]) == 1
    assert "toll" in capsys.readouterr().err
