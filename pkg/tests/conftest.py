import os
from pathlib import Path

import numpy as np
import pytest

from ecla.model import ConceptModel, ModelConfig

MNIST_DIR = Path(os.environ.get("ECLA_MNIST_DIR", "/root/data/mnist"))


def central_diff(f, arr, eps=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-7):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return ConceptModel.build(ModelConfig(6, 2, 3, (5,), hidden_activation="tanh"), seed=3)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
