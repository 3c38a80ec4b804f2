import numpy as np
import pytest

from udtsep.corpus import ToyConfig, synth_toy_corpus


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small synthetic corpus shared by corpus / model / cli tests."""
    root = tmp_path_factory.mktemp("toy")
    synth_toy_corpus(root, 5, ToyConfig(duration=2.5), seed=123)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line for the acceptance summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
