"""
Tests des scripts utilitaires (textures et balayage des couts).
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'scripts'))

from cost_sweep import parse_sizes, sweep  # noqa: E402
from make_textures import KINDS, make_texture  # noqa: E402


@pytest.mark.parametrize('kind', KINDS)
def test_textures_in_range(kind):
    img = make_texture(kind, 16, np.random.default_rng(0))
    assert img.shape == (16, 16, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_composite_halves():
    img = make_texture('composite', 16, np.random.default_rng(0))
    assert not np.ptp(img[:, :8], axis=(0, 1)).any()
    assert np.ptp(img[:, 8:]) > 0.0


def test_parse_sizes():
    assert parse_sizes('1,7x5,48') == [(1, 1), (7, 5), (48, 48)]


def test_sweep():
    table = sweep([(7, 5)], [1, 2])
    assert table['liif'].tolist() == [1_383_424 * 35, 1_383_424 * 4 * 35]
    assert table['lm_liif'].tolist() == [170_080 * 35, 163_488 * 35 + 6_592 * 4 * 35]
    assert table['reduction_pct'].iloc[0] == pytest.approx(87.71, abs=0.01)
