import json
import logging
import sys

import numpy as np
import pytest
from loguru import logger

from ssam_lab.config import load_config
from ssam_lab.numcore import MlpClassifier, NoisyQuadratic


@pytest.fixture
def caplog(caplog):
    """Route loguru records into pytest's caplog."""
    handler_id = logger.add(caplog.handler, format="{message}", level=0)
    caplog.set_level(logging.DEBUG)
    yield caplog
    logger.remove(handler_id)


@pytest.fixture(autouse=True)
def restore_logger():
    """The CLI replaces loguru's sinks; give every test a fresh stderr sink."""
    yield
    logger.remove()
    logger.add(lambda message: sys.stderr.write(message), level="INFO")


@pytest.fixture
def quadratic():
    """L = 1, R = 10, G = 10, sigma = 0.1."""
    return NoisyQuadratic(np.ones(10), sigma=0.1, radius=10.0)


@pytest.fixture
def small_mlp():
    return MlpClassifier(n_features=4, n_hidden=5, n_classes=3)


@pytest.fixture
def make_config(tmp_path):
    """Write an experiment file over the packaged defaults and load it."""

    def _make(payload: dict, name: str = "experiment.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload))
        return load_config(path, environ={})

    return _make
