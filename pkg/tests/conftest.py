import numpy as np
import pytest

from dualbranch.scene import GeneratorConfig, generate_scene


@pytest.fixture(scope="session")
def scene7():
    return generate_scene(7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    return GeneratorConfig(dims=(32, 32, 6), vehicles=(2, 2), buildings=(1, 2), cameras=2, image_size=(16, 16))


# --- acceptance summary ----------------------------------------------------------------
# Tests in test_acceptance.py are named test_criterion_<n>_<slug>; one line per
# criterion is printed at the end of the session.

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        number = name.split("_")[2]
        slug = " ".join(name.split("_")[3:])
        status = "PASS" if _CRITERIA[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {slug}")
