import time

import pytest

from sosmanifold.attdyn import build_example1, build_example2, circle_toy_system
from sosmanifold.soscert import SosProgramSpec, certify

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


class Certified:
    def __init__(self, system, cert, sol, maps, seconds):
        self.system, self.cert, self.sol, self.maps, self.seconds = system, cert, sol, maps, seconds


def _run(system, deg_V=4, deg_p=6):
    t0 = time.perf_counter()
    cert, sol, maps = certify(SosProgramSpec(system, deg_V=deg_V, deg_p=deg_p))
    return Certified(system, cert, sol, maps, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def circle_run():
    return _run(circle_toy_system())


@pytest.fixture(scope="session")
def aero_run():
    return _run(build_example1())


@pytest.fixture(scope="session")
def quat_run():
    return _run(build_example2())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
