import numpy as np
import pytest
import torch

import rendergan as rg
from rendergan.trainer import DatasetArrays

# Single-threaded torch: deterministic and, at these tensor sizes, faster.
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def layout_config():
    return rg.LayoutConfig()


@pytest.fixture(scope="session")
def tiny_source(layout_config):
    return rg.generate_dataset(layout_config, 6, 7, "source")


@pytest.fixture(scope="session")
def tiny_target(layout_config):
    return rg.generate_dataset(layout_config, 6, 8, "target")


@pytest.fixture(scope="session")
def source_arrays(tiny_source):
    return DatasetArrays.from_samples(tiny_source)


@pytest.fixture(scope="session")
def target_arrays(tiny_target):
    return DatasetArrays.from_samples(tiny_target)


@pytest.fixture(scope="session")
def backbone():
    return rg.FrozenBackbone()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
