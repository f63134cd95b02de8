import numpy as np
import pytest
import torch

from dfmkit.data import synth_mnist
from dfmkit.models import ModelSpec, build_model
from dfmkit.training import TrainConfig, train_standard


@pytest.fixture(scope="session")
def tiny_mnist():
    """Small surrogate digit dataset shared across tests."""
    return synth_mnist(n_train=5000, n_val=800, seed=42)


@pytest.fixture(scope="session")
def trained_lenet(tiny_mnist):
    """A LeNet trained well enough to extract from (not acceptance-grade)."""
    spec = ModelSpec("lenet", (1, 28, 28), 10)
    return train_standard(tiny_mnist, spec, TrainConfig(epochs=20, lr=0.02, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
