import numpy as np
import pytest

from ragncd.store import make_bundle


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tiny_bundle(data, labels=None, truth=None, prefix="s", **kw):
    data = np.asarray(data, dtype=np.float32)
    ids = [f"{prefix}{i}" for i in range(len(data))]
    if labels is not None and truth is None:
        truth = list(labels)
    return make_bundle(data, ids, labels=labels, class_truth=truth, **kw)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
