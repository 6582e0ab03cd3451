import numpy as np
import pytest
from fastapi.testclient import TestClient

from byzfl.config import settings
from byzfl.main import app
from byzfl.numcore import RngStream

client = TestClient(app)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance or timing check")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """A fixed root stream"""
    return RngStream(1234)


@pytest.fixture
def gen():
    """A numpy generator for building random test inputs"""
    return np.random.default_rng(2024)


@pytest.fixture
def no_timing(monkeypatch):
    """Write elapsed_s as 0.0 so CSVs can be compared byte for byte"""
    monkeypatch.setattr(settings, "record_timing", False)


def make_experiment(**overrides):
    """Small synthetic FedSGD experiment dict; keyword overrides go into `config`."""
    config = {
        "global_model": {"type": "logistic"},
        "data_config": {
            "dataset": {"type": "synthetic", "num_classes": 2, "input_dim": 5, "per_class": 100, "sep": 6.0},
            "partition": {"type": "iid"},
            "batch_size": 16,
        },
        "num_clients": 5,
        "num_malicious_clients": 0,
        "server_config": {"aggregator": {"type": "mean"}, "optimizer": {"lr": 0.1}},
        "eval_interval": 5,
    }
    config.update(overrides)
    return {"run": "FEDSGD", "stop": {"training_round": 10}, "seed": 7, "config": config}


@pytest.fixture
def experiment_dict():
    """Small synthetic FedSGD experiment"""
    return make_experiment()
