import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


# one line per acceptance criterion, filled by tests/test_acceptance.py
CRITERIA: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA, key=lambda k: int(k[1:])):
            terminalreporter.write_line(CRITERIA[key])
