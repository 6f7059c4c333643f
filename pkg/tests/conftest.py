import numpy as np
import pytest
from hypothesis import settings

from declutter.geometry import Camera
from declutter.refine import RefineConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# small and fast refinement for end-to-end tests; defaults are exercised separately
LIGHT_REFINE = RefineConfig(hidden=32, batch=1024, steps=300, lr=3e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return Camera(fx=100.0, fy=100.0, cx=32.0, cy=24.0, width=64, height=48)
