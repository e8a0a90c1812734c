import numpy as np
import pytest

from dress import env as sim


@pytest.fixture(scope="session")
def trap_env():
    return sim.make_scenarios("myopic-trap", seed=0)


@pytest.fixture(scope="session")
def small_dataset(trap_env):
    """Twenty logged users with short episodes, shared read-only across tests."""
    return sim.gen_logged_dataset(trap_env, sim.LoggingPolicy.for_env(trap_env), 20,
                                  sim.PowerLawLengths(lo=11, hi=20), seed=3, min_len=11, max_len=20)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria report one line each; they are echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
