import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from skgedrive.data import SceneConfig, synth_scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_samples():
    """A handful of synthetic scenes shared across tests."""
    return [synth_scene(s) for s in range(8)]


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, small_samples):
    from skgedrive.data import save_dataset

    d = tmp_path_factory.mktemp("ds")
    save_dataset(d, small_samples, list(range(8)))
    return d
