import os
from pathlib import Path

import numpy as np
import pytest

from pgmfuse import synthetic

REAL_ROOT = os.environ.get("SEMANTICKITTI_ROOT")
realdata = pytest.mark.skipif(not REAL_ROOT, reason="set SEMANTICKITTI_ROOT to run checks against SemanticKITTI")


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Three scans of a synthetic sequence 07 with a half-resolution camera."""
    root = tmp_path_factory.mktemp("synth")
    synthetic.write_dataset(root, ["07"], 3, seed=0, image_scale=0.5)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def real_root():
    return Path(REAL_ROOT)
