import numpy as np
import pytest

from guidance_lab import preset_model


class ZeroNoise:
    """Stand-in noise stream that always returns zeros (for fixed-point tests)."""

    def standard_normal(self, size=None):
        return np.zeros(size) if size is not None else 0.0


@pytest.fixture(scope="session")
def model():
    return preset_model("paper-gmm")


@pytest.fixture
def zero_noise():
    return ZeroNoise()
