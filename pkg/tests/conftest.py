import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(ROOT, "data")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central(a: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return a
    return a[..., border:-border, border:-border]
