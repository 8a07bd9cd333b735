"""
Tests des grilles de coordonnees, du depliement, du local ensemble et du
reechantillonnage bilineaire.
"""

import numpy as np
import pytest

from coord_grid import (axis_centers, bilinear_resize, cell_of, ensemble_corners, feature_unfold,
                        feature_unfold_backward, governing_codes, make_coord_grid, nearest_index)
from errors import DomainError, ShapeError


class TestGrid:

    def test_axis_centers(self):
        np.testing.assert_allclose(axis_centers(4), [-0.75, -0.25, 0.25, 0.75])

    def test_coords_shape(self):
        grid = make_coord_grid(3, 5)
        assert grid.coords.shape == (3, 5, 2)
        assert grid.flat().shape == (15, 2)
        np.testing.assert_allclose(grid.coords[1, 2], [0.0, 0.0])

    def test_zero_dims(self):
        with pytest.raises(DomainError):
            make_coord_grid(0, 3)

    def test_cell(self):
        cell = cell_of(4, 8)
        assert (cell.cell_h, cell.cell_w) == (0.5, 0.25)


class TestUnfold:

    def test_shape_and_center(self, rng):
        fm = rng.random((4, 5, 2))
        unf = feature_unfold(fm)
        assert unf.shape == (4, 5, 18)
        np.testing.assert_array_equal(unf[:, :, 8:10], fm)

    def test_replicate_border(self, rng):
        fm = rng.random((3, 3, 1))
        unf = feature_unfold(fm)
        # voisin (-1, -1) du coin superieur gauche: le coin lui-meme
        assert unf[0, 0, 0] == fm[0, 0, 0]
        # voisin (1, 1) du pixel central
        assert unf[1, 1, 8] == fm[2, 2, 0]

    def test_backward_is_transpose(self, rng):
        x = rng.standard_normal((4, 3, 2))
        g = rng.standard_normal((4, 3, 18))
        lhs = np.sum(feature_unfold(x) * g)
        rhs = np.sum(x * feature_unfold_backward(g, 2))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestEnsemble:

    def test_partition_of_unity(self):
        q = np.random.default_rng(5).uniform(-1, 1, size=(1_000_000, 2))
        corners = ensemble_corners(q, 7, 9)
        assert np.max(np.abs(corners.weights.sum(axis=1) - 1.0)) <= 1e-12

    def test_opposite_rectangle_areas(self, rng):
        q = rng.uniform(-0.8, 0.8, size=(50, 2))
        gh, gw = 6, 5
        c = ensemble_corners(q, gh, gw)
        opposite = [3, 2, 1, 0]
        areas = np.stack([np.abs(q[:, 0] - c.coords[:, t, 0]) * np.abs(q[:, 1] - c.coords[:, t, 1])
                          for t in range(4)], axis=1)
        expected = areas[:, opposite] / areas.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(c.weights, expected, atol=1e-12)

    def test_query_on_code_center(self):
        ys, xs = axis_centers(5), axis_centers(4)
        c = ensemble_corners([ys[2], xs[1]], 5, 4)
        t = int(np.argmax(c.weights[0]))
        assert c.weights[0, t] == pytest.approx(1.0, abs=1e-12)
        assert (c.index_y[0, t], c.index_x[0, t]) == (2, 1)

    def test_border_clamped(self):
        c = ensemble_corners([[-0.999, 0.999]], 4, 4)
        assert c.index_y.min() >= 0 and c.index_x.max() <= 3
        assert c.weights.sum() == pytest.approx(1.0)

    def test_nearest_and_governing(self):
        iy, ix = nearest_index([[-0.9, 0.9], [0.1, -0.1]], 2, 2)
        np.testing.assert_array_equal(iy, [0, 1])
        np.testing.assert_array_equal(ix, [1, 0])
        np.testing.assert_array_equal(governing_codes(4, 4, 2, 2),
                                      [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


class TestBilinear:

    def test_same_size_copy(self, rng):
        img = rng.random((3, 4, 2))
        out = bilinear_resize(img, 3, 4)
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_constant_exact(self):
        img = np.full((3, 5, 3), 0.37)
        np.testing.assert_array_equal(bilinear_resize(img, 8, 11), np.full((8, 11, 3), 0.37))

    def test_halving_averages_pairs(self):
        img = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
        out = bilinear_resize(img, 2, 2)
        np.testing.assert_allclose(out[:, :, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_errors(self, rng):
        with pytest.raises(DomainError):
            bilinear_resize(rng.random((2, 2, 1)), 0, 3)
        with pytest.raises(ShapeError):
            bilinear_resize(rng.random((2, 2)), 3, 3)
