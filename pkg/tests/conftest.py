import numpy as np
import pytest

from ptnlab import autodiff as ad
from ptnlab.classifier import ClassifierConfig
from ptnlab.ptn import PtnConfig


def tiny_ptn(**kw):
    """Slope predictor that fits 8x8 inputs."""
    base = dict(K=4, conv_layers=3, channels=(3, 3, 4), strides=(1, 2, 1), downsample_factor=1)
    base.update(kw)
    return PtnConfig(**base)


def tiny_classifier(**kw):
    base = dict(stem_width=3, stem_stride=2, widths=(3, 4), strides=(2, 1), input_size=8,
                epochs=2, batch_size=4)
    base.update(kw)
    return ClassifierConfig(**base)


def store_from(leaves):
    """ParameterStore whose entries are the given (probe) tensors."""
    store = ad.ParameterStore()
    for name, t in leaves.items():
        store.entries[name] = ad.Parameter(t)
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
