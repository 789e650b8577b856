import numpy as np
import pytest

from debias_opt.rng import make_rng

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture(scope="session")
def acceptance_log(request):
    """criterion number -> list of (part, passed, detail) lines."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_configure(config):
    # numerical slips should fail loudly in tests; the CLI and the divergence
    # tests opt out locally with np.errstate
    np.seterr(over="raise", invalid="raise", divide="raise")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(log):
        parts = log[number]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{p[0]}: {p[2]}" for p in parts)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
