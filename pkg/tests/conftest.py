import contextlib
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_LINES = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_LINES, [])

    @contextlib.contextmanager
    def check(num, title, limit):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            line = f"FAIL criterion {num}: {title} [{time.perf_counter() - start:.1f}s] {type(exc).__name__}: {exc}"
            lines.append(line.splitlines()[0])
            print(lines[-1])
            raise
        el = time.perf_counter() - start
        ok = el < limit
        lines.append(f"{'PASS' if ok else 'FAIL'} criterion {num}: {title} [{el:.1f}s, limit {limit}s]")
        print(lines[-1])
        assert ok, f"runtime {el:.1f}s exceeds {limit}s"

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
