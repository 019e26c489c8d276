import numpy as np
import pytest
import torch

from magat_mapf.expert import PlannerConfig, ecbs_solve
from magat_mapf.gridworld import GridMap, GridWorldCase

torch.set_num_threads(1)


def solved(width, height, starts, goals, obstacles=(), case_id="t"):
    """Case on a hand-built map with ECBS paths attached."""
    grid = GridMap(width, height, frozenset(obstacles))
    case = GridWorldCase(grid, tuple(starts), tuple(goals), None, case_id)
    return case.with_paths(ecbs_solve(case, PlannerConfig()).paths)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cases():
    """Thirty solved 6x6 cases with 3 robots; shared by training and evaluation tests."""
    from magat_mapf.training import generate_cases

    return generate_cases(30, 6, 6, 3, 0.1, seed=7)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line for a criterion; the lines are repeated in the terminal summary."""

    def report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
