import pytest
import torch

from styleaware.grouping import ClassifierSpec, train_artist_classifier
from styleaware.model import NetworkSpec, StyleTransferNetworks
from styleaware.synthetic import make_artist_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_nets():
    return StyleTransferNetworks(NetworkSpec(width_scale=0.125), seed=0).eval()


@pytest.fixture(scope="session")
def tiny_nets():
    return StyleTransferNetworks(NetworkSpec(width_scale=0.0625, n_residual_blocks=2), seed=0).eval()


@pytest.fixture(scope="session")
def artist_corpus():
    return make_artist_corpus(50, size=32, seed=11)


@pytest.fixture(scope="session")
def artist_classifier(artist_corpus):
    spec = ClassifierSpec(width_scale=0.0625, image_size=32)
    return train_artist_classifier(artist_corpus, spec, epochs=15, seed=3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
