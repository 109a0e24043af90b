import numpy as np
import pytest

from spaen import data, nets, objectives

# One line per acceptance criterion, registered by tests/test_acceptance.py
# and echoed after the run so output capture cannot swallow the verdicts.
acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance battery")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset():
    """A small but non-trivial dataset shared by read-only tests."""
    cfg = data.GenConfig(
        n_classes=8, n_attributes=12, n_per_class=10, image_size=16,
        noise_std=0.03, low_variance_fraction=0.25, unseen_count=2, seed=7,
    )
    return data.generate_synthetic(cfg)


@pytest.fixture(scope="session")
def small_splits(small_dataset):
    return data.make_splits(small_dataset, unseen_count=2, val_count=1, seed=7)


@pytest.fixture()
def tiny_net_config():
    return nets.NetConfig(
        embed_dim=6, image_size=8, conv_channels=(4, 6), hidden_width=10,
        decoder_channels=(6, 5, 4), seed=3,
    )


@pytest.fixture()
def tiny_bundle(tiny_net_config):
    return nets.build_models(tiny_net_config)


def make_hyper(**kwargs):
    defaults = dict(learning_rate=0.01, batch_size=8, n_critic=2, alpha=1.0, beta=0.5)
    defaults.update(kwargs)
    return objectives.HyperParams(**defaults)


def random_images(n, size, rng):
    return rng.uniform(0.0, 1.0, size=(n, size, size, 3))
