"""
Fixtures partagees et option --runslow pour les executions de taille acceptation.
"""

import os

import numpy as np
import pytest

os.environ.setdefault('LMF_ENV', 'testing')

from models import build_model  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='executer les tests marques slow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='necessite --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model('tiny', seed=0)


@pytest.fixture
def small_image(rng):
    return rng.random((5, 6, 3))


@pytest.fixture
def blind_model(tiny_model):
    """Modele dont le rendu ignore coordonnees et cellules relatives."""
    tiny_model.render_mlp.weights[0][tiny_model.d_c:, :] = 0.0
    return tiny_model
