import numpy as np
import pytest

from gltrans import BackboneConfig, GLTransNet, HeadConfig
from gltrans.data import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    return BackboneConfig()


def build_net(bcfg=None, **head):
    return GLTransNet(bcfg or BackboneConfig(), HeadConfig(**head), seed=0)


@pytest.fixture(scope="session")
def toy_data():
    return generate(SynthSpec())


def random_images(rng, n, cfg):
    return rng.uniform(0, 1, size=(n, cfg.image_h, cfg.image_w, cfg.channels)).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
