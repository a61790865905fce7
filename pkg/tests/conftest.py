import numpy as np
import pytest

from lmcridge import DatasetSlice, Network

_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record a one-line PASS/FAIL verdict for the acceptance summary."""

    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        _RESULTS.append(line)
        print(line)
        return ok

    return record


def random_classification(n, in_dim, classes, seed):
    rng = np.random.default_rng(seed)
    return DatasetSlice(rng.normal(size=(n, in_dim)), rng.integers(0, classes, n))


def random_regression(n, in_dim, out_dim, seed):
    rng = np.random.default_rng(seed)
    return DatasetSlice(rng.normal(size=(n, in_dim)), rng.normal(size=(n, out_dim)))


@pytest.fixture
def tiny_mlp():
    """3-layer tanh MLP with 43 parameters on 9 random points."""
    net = Network.mlp(3, [4, 3], 3, activation="tanh")
    return net, random_classification(9, 3, 3, seed=0)


def tiny_nets():
    """(net, data) pairs with at most 50 parameters each."""
    return [
        (Network.mlp(3, [4, 3], 3, activation="tanh"), random_classification(9, 3, 3, 1)),
        (Network.mlp(2, [5], 2, activation="softplus", loss="mse"), random_regression(6, 2, 2, 2)),
        (Network.mlp(4, [6], 2, activation="sigmoid"), random_classification(11, 4, 2, 3)),
        (Network.mlp(2, [3, 3], 2, activation="tanh", loss="mse"), random_regression(5, 2, 2, 4)),
        (Network((1, 4, 4), [{"type": "conv", "channels": 2, "kernel": 3, "padding": 1, "stride": 2},
                             {"type": "tanh"}, {"type": "flatten"}, {"type": "dense", "units": 2}]),
         DatasetSlice(np.random.default_rng(5).normal(size=(4, 1, 4, 4)),
                      np.array([0, 1, 1, 0]))),
        (Network((1, 4, 4), [{"type": "conv", "channels": 2, "kernel": 2}, {"type": "softplus"},
                             {"type": "avgpool", "size": 3}, {"type": "flatten"},
                             {"type": "dense", "units": 2}]),
         DatasetSlice(np.random.default_rng(6).normal(size=(5, 1, 4, 4)),
                      np.array([0, 1, 1, 0, 1]))),
    ]
