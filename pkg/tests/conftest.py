from __future__ import annotations

import numpy as np
import pytest

from ensq.model import ModelParams, derive

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def params() -> ModelParams:
    return ModelParams().validate()


@pytest.fixture
def derived(params):
    return derive(params)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
