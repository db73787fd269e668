import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def desk_lq():
    from usrecon.core import make_preset_config

    return make_preset_config("desk-lq")


@pytest.fixture(scope="session")
def desk_uq():
    from usrecon.core import make_preset_config

    return make_preset_config("desk-uq")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records an exit-criterion line and asserts ``ok``."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def check(n, ok, detail=""):
        line = f"criterion {n:2d} ... {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append((n, line))
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("exit criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
