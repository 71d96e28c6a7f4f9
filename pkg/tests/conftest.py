import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True, scope="session")
def _single_thread_torch():
    # bit-reproducible reductions
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
