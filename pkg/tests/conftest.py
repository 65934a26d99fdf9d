import numpy as np
import pytest

from singledir.data import Dataset, synthetic_blobs
from singledir.nn import TrainConfig, mlp, train


def finite_difference(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def balanced_gaussian(n_per_class, n_classes, dim, seed=0):
    g = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(g.normal(size=(len(labels), dim)), labels, n_classes, "gauss")


@pytest.fixture(scope="session")
def blobs10():
    return synthetic_blobs(40, 10, 6, 4.0, seed=3)


@pytest.fixture(scope="session")
def trained_blob_mlp(blobs10):
    model = mlp(6, [24, 16], 10, seed=1)
    train(model, blobs10, TrainConfig(lr=0.2, batch_size=16, epochs=30, seed=1))
    return model


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    """Store and print one acceptance verdict line."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long-running trained-model acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
