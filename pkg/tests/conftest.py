import os

# Pin BLAS threading before numpy loads so results are independent of the
# machine's core count (byte-reproducibility of CSV outputs).
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from fedsim.problem import ProblemConfig, closed_form_optimum, generate_federation


@pytest.fixture(scope="session")
def small_problem():
    """Small, well-conditioned federation reused by cheap tests."""
    cfg = ProblemConfig(num_clients=5, feature_dim=12, output_dim=3,
                        samples_per_client=15, ridge=0.1, noise_std=0.01,
                        het_level=0.5, data_seed=7)
    fed = generate_federation(cfg)
    return cfg, fed, closed_form_optimum(fed, cfg.ridge)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
