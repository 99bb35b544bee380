import numpy as np
import pytest

from ionchannel.mesh import ChannelGeometry, build_box_mesh, build_channel_mesh, build_cylinder_mesh


@pytest.fixture(scope="session")
def block_mesh():
    return build_channel_mesh(ChannelGeometry(10e-9, 2e-9, 2e-9, 0.5e-9))


@pytest.fixture(scope="session")
def cylinder():
    return build_cylinder_mesh(1.0, 0.5, 0.125)


@pytest.fixture(scope="session")
def unit_box():
    return build_box_mesh((0, 0, 0), (1, 1, 1), 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) == "call":
                lines += [v for k, v in getattr(rep, "user_properties", ()) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: (int("".join(c for c in s.split(":")[0][10:] if c.isdigit())), s)):
            terminalreporter.write_line(line)
