import numpy as np
import pytest
import torch

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, tensor, index, h=1e-6):
    """Derivative of scalar f() w.r.t. tensor[index] by central differences."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = float(f())
        tensor[index] = orig - h
        down = float(f())
        tensor[index] = orig
    return (up - down) / (2 * h)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
