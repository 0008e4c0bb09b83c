import itertools

import numpy as np
import pytest

from hpl.config import default_config, ExperimentConfig
from hpl.detector_bank import DetectorBankConfig

ACCEPTANCE_RESULTS: dict[int, str] = {}


def enumerate_clicks(weights, n):
    """Brute-force P(click set) for n photons: each photon goes to detector i
    with probability weights[i] or is lost; returns {frozenset(indices): prob}."""
    m = len(weights)
    outcomes = list(range(m)) + [None]
    probs = list(weights) + [1.0 - sum(weights)]
    table = {}
    for assignment in itertools.product(range(m + 1), repeat=n):
        p = 1.0
        for a in assignment:
            p *= probs[a]
        hit = frozenset(outcomes[a] for a in assignment if outcomes[a] is not None)
        table[hit] = table.get(hit, 0.0) + p
    return table


@pytest.fixture
def reference_signal_bank():
    return DetectorBankConfig.from_list(default_config()["signal_bank"])


@pytest.fixture
def reference_config():
    return ExperimentConfig.from_dict(default_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
