import numpy as np
import pytest
import torch

from inrinvert.encoder import ToyEncoder
from inrinvert.fixtures import load_fixture_corpus, load_fixture_store


@pytest.fixture(scope="session")
def toy_encoder():
    return ToyEncoder()


@pytest.fixture(scope="session")
def fixture_corpus():
    return load_fixture_corpus()


@pytest.fixture(scope="session")
def fixture_store(toy_encoder):
    return load_fixture_store(expected_fingerprint=toy_encoder.fingerprint)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def rand_image(rng, h=64, w=64):
    return rng.random((h, w, 3))


@pytest.fixture(scope="session")
def torch_threads():
    return torch.get_num_threads()
