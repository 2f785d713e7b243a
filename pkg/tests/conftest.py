import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def make_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), unit=None):
    from lungcad.volume import Unit, Volume
    return Volume(np.asarray(data, dtype=np.float32), spacing, origin,
                  unit or Unit.HOUNSFIELD)
