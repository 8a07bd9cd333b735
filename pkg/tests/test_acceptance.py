"""
Executions de taille acceptation: surapprentissage d'une image 32x32 et
correlation entre intensite de modulation et complexite locale.

Lancer avec: pytest --runslow tests/test_acceptance.py
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'scripts'))

from cmsr import code_complexity, raw_shift_means, spearman  # noqa: E402
from coord_grid import bilinear_resize, cell_of  # noqa: E402
from decoder import latent_stage, prepare  # noqa: E402
from make_textures import make_texture  # noqa: E402
from models import build_model  # noqa: E402
from trainer import TrainConfig, bicubic_downsample, psnr, reconstruct, train  # noqa: E402

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def composite():
    return make_texture('composite', 32, np.random.default_rng(11))


@pytest.fixture(scope='module')
def trained(composite):
    cfg = TrainConfig(patch=8, scale_min=1.0, scale_max=4.0, lr=1e-3, steps=4000,
                      decay_every=2000, decay_factor=0.5, seed=0)
    model, curve = train(build_model('desk', seed=0), [composite], cfg, log_every=500)
    return model, curve


def test_overfit_loss_drops(trained):
    _, curve = trained
    initial = curve['loss'].iloc[:50].mean()
    final = curve['loss'].iloc[-50:].mean()
    assert final < initial / 5


def test_reconstruction_beats_bilinear(trained, composite):
    model, _ = trained
    lr, sr = reconstruct(model, composite, 2)
    baseline = bilinear_resize(lr, 32, 32)
    assert psnr(sr, composite) >= psnr(baseline, composite) + 0.5


def test_modulation_follows_complexity(trained, composite):
    model, _ = trained
    lr = bicubic_downsample(composite, 2)
    gh, gw = lr.shape[:2]
    grid = latent_stage(model, prepare(model, lr), cell_of(32, 32))
    means = raw_shift_means(grid)
    complexity = code_complexity(composite, gh, gw)
    assert spearman(means, complexity) >= 0.3
    assert means[:, gw // 2:].mean() > means[:, :gw // 2].mean()
