import numpy as np
import pytest

from factored_rl.envs import SysadminSpec, build_sysadmin


@pytest.fixture(scope="session")
def circle4():
    return build_sysadmin(SysadminSpec("circle", 4))


@pytest.fixture(scope="session")
def threeleg4():
    return build_sysadmin(SysadminSpec("three-leg", 4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
