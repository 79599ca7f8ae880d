import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**changes):
    """A configuration small enough to train for a few epochs in seconds."""
    from vivim.config import TrainConfig
    base = dict(epochs=2, batch=2, frames=2, size=32, train_clips=4, val_clips=2,
                lr=1e-3, lr_min=1e-5, channels=(4, 8, 12, 16), depths=(1, 1, 1, 1),
                heads=(1, 1, 1, 1), reductions=(4, 2, 1, 1), decoder_dim=8,
                affine_steps=20, affine_corpus=256, affine_hidden=16)
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
