import numpy as np
import pytest
import torch

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def accept():
    """Record one acceptance criterion outcome for the terminal summary."""

    def _record(label: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE.append((label, bool(ok), detail))

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
