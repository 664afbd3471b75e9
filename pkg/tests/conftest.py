import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make tests/reference.py importable

from ctxpress.model import ModelSpec, build_model


@pytest.fixture(scope="session")
def tiny_weights():
    """Smallest interesting model: 4 layers, 2 heads of 16 dims."""
    return build_model(ModelSpec(dim=32, heads=2, layers=4, seed=11))


@pytest.fixture(scope="session")
def toy_weights():
    """The acceptance-scale model: seed 7, 4 layers, 4 heads of 16 dims."""
    return build_model(ModelSpec(dim=64, heads=4, layers=4, seed=7))


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.Philox(key=np.array([99, 7], dtype=np.uint64)))
