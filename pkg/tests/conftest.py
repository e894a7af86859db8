"""Shared fixtures for the CycleUV test suite."""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.networks import init_params
from core.trainer import TrainConfig

RUN_SLOW_ENV = "CYCLEUV_RUN_SLOW"

SMALL_HIDDEN = (8, 8)
SMALL_EMBED = 4


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale acceptance runs (set CYCLEUV_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get(RUN_SLOW_ENV) == "1":
        return
    skip = pytest.mark.skip(reason=f"set {RUN_SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    """Narrow sub-networks with identity-initialized offset heads."""
    return init_params(3, hidden_dims=SMALL_HIDDEN, embed_dim=SMALL_EMBED)


@pytest.fixture
def random_net(rng):
    """Narrow sub-networks with every layer (offset heads included) random."""
    net = init_params(5, hidden_dims=SMALL_HIDDEN, embed_dim=SMALL_EMBED)
    params = {name: rng.normal(0.0, 0.5, size=value.shape) for name, value in net.parameters().items()}
    net.assign(params)
    return net


@pytest.fixture
def small_config_dict():
    """Sectioned config for fast training tests."""
    return {
        "network": {"hidden_dims": list(SMALL_HIDDEN), "embed_dim": SMALL_EMBED},
        "schedule": {"total_steps": 6, "jacobian_points": 64, "perturbation": 0.005},
        "training": {"seed": 11, "log_every": 1, "checkpoint_every": 3},
        "input": {"points": 64},
    }


@pytest.fixture
def small_config(small_config_dict):
    return TrainConfig.from_config(small_config_dict)


@pytest.fixture
def sphere_points():
    """64 roughly uniform points on the unit sphere (Fibonacci lattice)."""
    n = 64
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
