import numpy as np
import pytest

from twophase.data import CohortTable
from twophase.simgen import ScenarioConfig, generate_cohort


def full_table(table: CohortTable, x: np.ndarray) -> CohortTable:
    """Every row sampled with weight 1 (a census of phase 2)."""
    return table.with_phase2(np.arange(table.n_rows), x, np.ones(table.n_rows))


@pytest.fixture(scope="session")
def cohort():
    cfg = ScenarioConfig(beta1=1.0, sensitivity=0.8, specificity=0.8, seed=7)
    table, x = generate_cohort(cfg, 0)
    return cfg, table, x


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_REPORT: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; every line is repeated in the terminal summary."""
    def emit(criterion: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _REPORT.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance")
        for line in _REPORT:
            terminalreporter.write_line(line)
