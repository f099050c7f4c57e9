import numpy as np
import pytest

from sparsecl.data import build_synthetic_tasks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_stream():
    """5 tasks x 2 classes, 16-dim blobs; trains in well under a second."""
    return build_synthetic_tasks(T=5, classes_per_task=2, dim=16, n_per_class=40,
                                 separation=4.0, seed=3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in RESULTS:
            terminalreporter.write_line(line)
