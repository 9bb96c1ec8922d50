"""Shared fixtures and the acceptance summary printed at the end of a run."""

import pytest
import torch

from sensorlang.synthdata import GeneratorConfig, generate_dataset

torch.set_num_threads(1)

_ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance result line; printed by ``pytest_terminal_summary``."""
    _ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset(GeneratorConfig())


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(GeneratorConfig(samples_per_class=8))
