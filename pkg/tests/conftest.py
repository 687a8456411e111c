import cv2
import numpy as np
import pytest
import torch

# The CI box is a single-core container. More than one torch thread thrashes
# and slows everything ~10x, so pin threads before any test runs.
torch.set_num_threads(1)
cv2.setNumThreads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    gen = torch.Generator()
    gen.manual_seed(1234)
    return gen
