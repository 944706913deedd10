import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="lance aussi les experiences de bout en bout (plusieurs minutes)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: experience de bout en bout, lancee avec --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="utiliser --runslow pour lancer ce test")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("REWEIGH_OUTPUT_ROOT", str(tmp_path))
    return tmp_path
