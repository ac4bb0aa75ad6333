from __future__ import annotations

import sys

import numpy as np
import pytest

from fastbat.models import LossPair, ModelSpec, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    """Softplus MLP on 5-dimensional inputs with a batch of three examples."""
    spec = ModelSpec(5, 3, (7,), "softplus", seed=11)
    pair = LossPair(spec)
    theta = init_params(spec)
    data_rng = np.random.default_rng(5)
    x = data_rng.uniform(0, 1, size=(3, 5))
    y = np.array([0, 2, 1])
    return pair, theta, x, y


@pytest.fixture(scope="session")
def mnist_files(tmp_path_factory):
    """IDX files built from the 5000-digit sample shipped with mlxtend."""
    pytest.importorskip("mlxtend")
    from fastbat.data import export_mlxtend_digits

    return export_mlxtend_digits(tmp_path_factory.mktemp("mnist"))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "REPORT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
