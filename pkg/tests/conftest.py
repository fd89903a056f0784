import numpy as np
import pytest
import torch

# acceptance criteria report: one pass/fail line per criterion, printed in the
# terminal summary so `pytest -v` shows them even for passing tests
ACCEPTANCE_RESULTS = []


def record_criterion(name, passed, detail=""):
    ACCEPTANCE_RESULTS.append((str(name), bool(passed), str(detail)))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(1234)
