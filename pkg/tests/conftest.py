import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rapforge.datasets import SceneSpec, generate_synthetic_dataset
from rapforge.detectors import toy_detector


@pytest.fixture
def handle():
    return toy_detector()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """25 blob scenes with masks and detector-defined ground truth."""
    root = tmp_path_factory.mktemp("smallset")
    manifest = generate_synthetic_dataset(
        root, count=25, seed=42, detector=toy_detector(), scene_spec=SceneSpec(blob_sizes=(14, 16, 18))
    )
    return manifest
