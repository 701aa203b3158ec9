import numpy as np
import pytest
import torch

from lmlcc.ingest import CtVolume
from lmlcc.phantom import generate_dataset
from lmlcc.preprocess import Patch


@pytest.fixture
def small_volume():
    """5 x 4 x 3 (x, y, z) volume with distinct HU values."""
    voxels = (np.arange(60, dtype=np.int16).reshape(3, 4, 5) * 10 - 300)

    return CtVolume('series-a', (5, 4, 3), (0.7, 0.8, 1.25),
                    (-10.5, 20.0, -300.25), voxels)


@pytest.fixture(scope='session')
def phantoms():
    """Small labeled phantom set with a hidden-label pool."""
    return generate_dataset(12, 12, side=16, seed=3, n_unlabeled=8,
                            verbose=False)


@pytest.fixture
def random_patches():
    def make(n, side=16, seed=0):
        rng = np.random.default_rng(seed)

        return [Patch(f'n{i}', side, rng.random((side,) * 3)
                      .astype(np.float32), label=i % 2)
                for i in range(n)]

    return make


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
