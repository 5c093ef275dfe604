import numpy as np
import pytest

from localcal.dataset import CalibrationDataset


def random_dataset(rng, n=40, m=3, C=3, scale=1.0):
    feats = rng.normal(size=(n, m)).astype(np.float32) * scale
    logits = rng.normal(size=(n, C)).astype(np.float32) * 2
    labels = rng.integers(0, C, size=n)
    labels[:C] = np.arange(C)
    return CalibrationDataset(feats, logits, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset(rng):
    return random_dataset(rng)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report_line():
    """Record one pass/fail summary line per acceptance criterion."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name} ({detail})"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
