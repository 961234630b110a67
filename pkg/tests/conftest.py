import time

import numpy as np
import pytest

from dtsdf.geometry import CameraIntrinsics

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None or (report.when != "call" and report.passed):
        return
    _CRITERIA.setdefault(crit, []).append("SKIP" if report.skipped else ("PASS" if report.passed else "FAIL"))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_CRITERIA):
        seen = _CRITERIA[crit]
        verdict = "FAIL" if "FAIL" in seen else ("PASS" if "PASS" in seen else "SKIP")
        terminalreporter.write_line(f"criterion {crit}: {verdict}")


@pytest.fixture
def small_K():
    return CameraIntrinsics(150.0, 150.0, 79.5, 59.5, 160, 120)


@pytest.fixture
def tiny_K():
    return CameraIntrinsics(75.0, 75.0, 39.5, 29.5, 80, 60)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Stopwatch:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


@pytest.fixture
def stopwatch():
    return Stopwatch
