import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trimodal.encoder import EncoderConfig, init_encoder
from trimodal.synthetic import SyntheticSpec, gen_synthetic
from trimodal.tokenize import Vocab

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def corpus():
    return gen_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def vocab(corpus):
    return Vocab.build(corpus.all_texts())


@pytest.fixture(scope="session")
def tiny_encoder(vocab):
    return init_encoder(EncoderConfig(vocab_size=len(vocab), dim=16, layers=1, heads=2, max_len=32, seed=3))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
