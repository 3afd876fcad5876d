import numpy as np
import pytest

from dualrecon.model import ModelConfig
from dualrecon.tensor import engine as E

TINY = ModelConfig(kind="triplane", R=8, d=4, L=4, K=8, heads=2, k_conv=8)


@pytest.fixture
def f64():
    with E.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} | {detail}"
        _ACCEPTANCE.append(line)
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
