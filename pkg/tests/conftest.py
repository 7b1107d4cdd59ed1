"""Shared fixtures: desk-scale tubes are solved once and kept in the pytest cache."""
from pathlib import Path

import pytest

from hjfilter.cli import cmd_solve
from hjfilter.config import BenchmarkConfig

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"

# criterion number -> (passed, detail); printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def desk(request):
    """``(config, out_dir)`` with both desk ensembles solved.

    The solve is skipped when the cached manifest already matches the solver
    hash, so only the first run pays for it (a few minutes).
    """
    cfg = BenchmarkConfig.load(DESK_CONFIG)
    out = Path(request.config.cache.mkdir("desk"))
    cmd_solve(cfg, out)
    return cfg, out


@pytest.fixture
def record_acceptance():
    def record(criterion: int, passed: bool, detail: str):
        ACCEPTANCE[criterion] = (bool(passed), detail)
        assert passed, f"acceptance {criterion}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE {n}: {'PASS' if passed else 'FAIL'}  {detail}")
