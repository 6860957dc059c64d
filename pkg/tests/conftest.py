"""Pytest configuration and fixtures."""

import math

import pytest
import torch
from fastapi.testclient import TestClient

from app.core.config import TrainConfig
from app.main import app
from app.models.physics import AtomSystem, GateKind
from app.services.ansatz import ChainedNetwork, Interval, PulseFamily, uniform_intervals
from app.services.hamiltonians import HamiltonianModel

TINY_ARCH = (3, 6, 3, 12)


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="Run long reproduction tests"
    )


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: long-running reproduction test (needs --run-slow)")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def client() -> TestClient:
    """Create test client."""
    return TestClient(app)


@pytest.fixture
def two_atoms() -> AtomSystem:
    """Two atoms at the default blockade strength, no decay."""
    return AtomSystem(n_atoms=2)


@pytest.fixture
def three_atoms() -> AtomSystem:
    """Three atoms at the default blockade strength, no decay."""
    return AtomSystem(n_atoms=3)


@pytest.fixture
def c1p_model(two_atoms: AtomSystem) -> HamiltonianModel:
    """Finite-blockade two-atom model."""
    return HamiltonianModel.build(two_atoms)


@pytest.fixture
def tiny_net() -> ChainedNetwork:
    """Small chained network with few knots."""
    return ChainedNetwork(TINY_ARCH, t_bound=1.2 * 7.612, n_knots=6, seed=3)


@pytest.fixture
def tiny_family() -> PulseFamily:
    """Two-interval C1P family of small networks."""
    members = [
        (interval, ChainedNetwork(TINY_ARCH, t_bound=1.2 * 7.612, n_knots=6, seed=index))
        for index, interval in enumerate(uniform_intervals(2))
    ]
    return PulseFamily(GateKind.C1P, members)


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    """Short training run on a miniature network."""
    return TrainConfig(
        batch_m=3,
        learning_rate=1e-2,
        max_iters=4,
        plateau_window=2,
        arch=TINY_ARCH,
        n_knots=6,
        n_intervals=2,
        checkpoint_every=2,
        log_every=1,
        seed=7,
    )


@pytest.fixture
def upper_half() -> Interval:
    return Interval(math.pi / 2, math.pi)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield
