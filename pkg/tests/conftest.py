import os
import sys

# Single-threaded BLAS keeps float sums in a fixed order between runs and processes
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
os.environ.setdefault("LSPTM_PROGRESS", "0")
os.environ.setdefault("LSPTM_RUN_LOG", "")

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from models.clip_info import SynthSpec
from services.dataset import generate_synthetic
from services.tensor import default_dtype


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 clips (5 normal, 3 benign, 4 malignant) of 20 frames at 16x16."""
    out = tmp_path_factory.mktemp("small_dataset")
    spec = SynthSpec(n_per_class={"normal": 5, "benign": 3, "malignant": 4}, frames=20, resolution=(16, 16), seed=3)
    return generate_synthetic(spec, str(out))


@pytest.fixture(scope="session")
def learnable_dataset(tmp_path_factory):
    """60 clips, 30 malignant against 15 normal and 15 benign, 64 frames at 64x64."""
    out = tmp_path_factory.mktemp("learnable_dataset")
    return generate_synthetic(SynthSpec(seed=11), str(out))
