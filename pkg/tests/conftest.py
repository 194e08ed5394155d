import numpy as np
import pytest

from srocmeta.data import StudyRecord, make_dataset
from srocmeta.simulation import SimConfig, generate_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_dataset(rng, n_studies=8, m_max=4, tau_sq=0.3, rho=0.4, ragged=True):
    """Small synthetic dataset; with ``ragged`` each study keeps a random threshold subset."""
    cfg = SimConfig(n_studies=n_studies, m_max=m_max, tau1_sq=tau_sq, tau0_sq=tau_sq,
                    rho=rho, n_range=(20, 300), replicates=1)
    recs = generate_dataset(cfg, rng)
    if ragged:
        out = []
        for r in recs:
            size = int(rng.integers(1, r.m + 1))
            out.append(r.subset(np.sort(rng.choice(r.m, size, replace=False))))
        out[0] = recs[0]
        recs = out
    return make_dataset(recs)


def random_theta(rng):
    return np.array([
        rng.uniform(0, 3), rng.uniform(-1, 2), rng.uniform(-3, -0.2), rng.uniform(0.2, 3),
        rng.uniform(0.01, 2), rng.uniform(0.01, 2), rng.uniform(-0.95, 0.95),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_dataset():
    recs = [
        StudyRecord("a", [0.2, 0.4, 0.6], [45, 38, 20], [30, 41, 52], 50, 60),
        StudyRecord("b", [0.2, 0.6], [70, 40], [40, 75], 80, 90),
        StudyRecord("c", [0.4], [18, ], [25], 25, 30),
        StudyRecord("d", [0.2, 0.4, 0.6, 0.8], [95, 80, 61, 30], [51, 70, 88, 99], 100, 110),
        StudyRecord("e", [0.4, 0.8], [33, 10], [44, 58], 40, 60),
    ]
    return make_dataset(recs)
