import os
from pathlib import Path

import numpy as np
import pytest

from onglab.model import Batch, init_kaiming

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("ONGLAB_MNIST_DIR", ROOT / "data" / "mnist"))
MNIST_TRAIN_IMAGES = MNIST_DIR / "train-images-idx3-ubyte.gz"
MNIST_TRAIN_LABELS = MNIST_DIR / "train-labels-idx1-ubyte.gz"

_REPORT = []


def mnist_available() -> bool:
    return MNIST_TRAIN_IMAGES.is_file() and MNIST_TRAIN_LABELS.is_file()


requires_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return init_kaiming((6, 4, 3), seed=7)


@pytest.fixture
def small_batch():
    r = np.random.default_rng(99)
    return Batch(r.normal(size=(8, 6)), r.integers(0, 3, size=8))


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one line per acceptance criterion; printed at session end."""
    return _REPORT


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _REPORT:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


_DESK_CACHE = {}


def desk_run(benchmark: str, variant: str, seed: int):
    """5-task desk-scale MNIST run (train subset 5000, default hyperparameters), cached per session.

    Returns ``(matrix, log, seconds)``.
    """
    import time

    from onglab.continual import TrainConfig, run_experiment
    from onglab.tasks import load_mnist_idx, make_permuted, make_rotated, rotation_schedule

    key = (benchmark, variant, seed)
    if key not in _DESK_CACHE:
        if "base" not in _DESK_CACHE:
            _DESK_CACHE["base"] = load_mnist_idx(MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS)
        base = _DESK_CACHE["base"]
        if benchmark == "permuted":
            tasks = make_permuted(base, 5, master_seed=seed, train_subset=5000)
        else:
            tasks = make_rotated(base, rotation_schedule(5, 10.0), split_seed=seed, train_subset=5000)
        start = time.perf_counter()
        matrix, log = run_experiment(tasks, TrainConfig(variant=variant, seed=seed))
        _DESK_CACHE[key] = (matrix, log, time.perf_counter() - start)
    return _DESK_CACHE[key]
