import os

import numpy as np
import pytest

from deepfp.systemic_risk import InterBankParams, build_game, riccati_solve


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DEEPFP_LONG") == "1":
        return
    skip = pytest.mark.skip(reason="long reproduction run; set DEEPFP_LONG=1 to enable")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def params5():
    return InterBankParams(N=5)


@pytest.fixture(scope="session")
def game5(params5):
    return build_game(params5)


@pytest.fixture(scope="session")
def riccati5(params5):
    return riccati_solve(params5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""
    def record(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
