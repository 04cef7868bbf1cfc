import json
from pathlib import Path

import numpy as np
import pytest

from mmnl.data import ScenarioConfig, build_true_population, generate_dataset

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (any shape)."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


@pytest.fixture(scope="session")
def small_s1():
    cfg = ScenarioConfig(1, num_individuals=40, num_occasions=4, seed=7)
    pop = build_true_population(cfg)
    return generate_dataset(cfg, pop)


@pytest.fixture(scope="session")
def small_s3():
    cfg = ScenarioConfig(3, num_individuals=30, num_occasions=3, seed=8)
    pop = build_true_population(cfg)
    return generate_dataset(cfg, pop)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
