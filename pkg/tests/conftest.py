from pathlib import Path

import pytest

RESOURCES_DIR = Path(__file__).parent / "resources"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical checks that run many replications")


@pytest.fixture
def resources_dir() -> Path:
    return RESOURCES_DIR


@pytest.fixture
def sample_ndjson() -> Path:
    """Raw loans covering every filter reason plus two unparsable lines."""
    return RESOURCES_DIR / "loans_sample.ndjson"


@pytest.fixture
def small_vectors() -> Path:
    """Six 4-d vectors; `loan` appears twice."""
    return RESOURCES_DIR / "vectors_small.txt"
