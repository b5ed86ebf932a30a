import numpy as np
import pytest

from frontseg import functional as F
from frontseg.tensor import Tensor


def project(out: Tensor, seed: int) -> Tensor:
    """Scalar <out, r> / sqrt(n) with fixed random r, keeping the value O(1)."""
    r = np.random.default_rng(seed + 1000).standard_normal(out.shape) / np.sqrt(out.size)
    return F.sum(F.mul(out, Tensor(r)))


def rand_tensor(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
