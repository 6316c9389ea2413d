import numpy as np
import pytest

from tffa.simgen import SimConfig, simulate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sim():
    """20x20 grid, two BI factors, five subjects, short series."""
    cfg = SimConfig(M=20, J=100, K=2, n=5, P=20, seed=7)
    scans, truth = simulate_dataset(cfg)
    return cfg, scans, truth
