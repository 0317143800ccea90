import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eras.mixsim import SceneParams, make_scene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


@pytest.fixture(scope="session")
def scenes():
    return [make_scene(s) for s in range(3)]


@pytest.fixture(scope="session")
def short_scene():
    return make_scene(11, SceneParams(duration=0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns ``passed``."""
    log = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(cid: int, name: str, passed: bool, detail: str) -> bool:
        line = f"C{cid:<2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        log.append((cid, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
