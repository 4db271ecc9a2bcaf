import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_qkv(rng, T, d, T_q=None):
    T_q = T if T_q is None else T_q
    Q = rng.standard_normal((T_q, d)).astype(np.float32)
    K = rng.standard_normal((T, d)).astype(np.float32)
    V = rng.standard_normal((T, d)).astype(np.float32)
    return Q, K, V


def score_instance(scores):
    """Single query ``[1, 0]`` against keys ``[s, 0]``: dot products equal ``scores``."""
    K = np.zeros((len(scores), 2), dtype=np.float32)
    K[:, 0] = scores
    Q = np.array([[1.0, 0.0]], dtype=np.float32)
    return Q, K


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "failed": [], "passed": 0})
    if rep.passed:
        entry["passed"] += 1
    else:
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "FAIL" if e["failed"] else "PASS"
        detail = f" (failing: {', '.join(e['failed'])})" if e["failed"] else ""
        terminalreporter.write_line(f"criterion {n} [{e['title']}]: {status}{detail}")
