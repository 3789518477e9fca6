import os

# single-threaded BLAS and numba so that runs are bitwise reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from denseflow.losses import LossWeights
from denseflow.network import NetworkConfig
from denseflow.toy import ToyConfig, gen_toy_dataset
from denseflow.trainer import AugmentationConfig, LossConfig, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    """Full topology at a size that runs in milliseconds."""
    return NetworkConfig(growth_rate=4, num_blocks_down=2, num_blocks_up=2, layers_per_block=2,
                         initial_channels=4, flow_levels=3)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(base_lr=1e-3, max_iters=6, batch_size=2, seed=3, checkpoint_every=3,
                       augmentation=AugmentationConfig(noise=False),
                       loss=LossConfig(weights=LossWeights((0.32, 0.08, 0.02)).weights))


@pytest.fixture(scope="session")
def toy_samples():
    return gen_toy_dataset(ToyConfig(size=16, num_shapes=1, shape_min=4, shape_max=8,
                                     max_displacement=2.0, seed=5), 6)


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Records one verdict per acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
