"""
Tests des noyaux MLP, de la modulation FiLM et de la retropropagation.
"""

import numpy as np
import pytest

from cost_model import MacCounter
from errors import ModulationArityError, ShapeError, StaleTapeError
from tensor_core import (FilmParams, MlpParams, film_apply, mlp_backward, mlp_forward,
                         mlp_forward_modulated)


@pytest.fixture
def mlp(rng):
    return MlpParams.init([(5, 7), (7, 7), (7, 3)], modulated_layers=(0, 1), rng=rng)


def _numeric_grad(f, arr, h=1e-6):
    grad = np.zeros_like(arr)
    for i in range(arr.size):
        orig = arr.flat[i]
        arr.flat[i] = orig + h
        fp = f()
        arr.flat[i] = orig - h
        fm = f()
        arr.flat[i] = orig
        grad.flat[i] = (fp - fm) / (2 * h)
    return grad


class TestMlpParams:

    def test_init_dims(self, mlp):
        assert mlp.layer_dims == [(5, 7), (7, 7), (7, 3)]
        assert mlp.in_dim == 5 and mlp.out_dim == 3
        assert mlp.n_modulated == 2
        assert mlp.hidden_width(1) == 7

    def test_init_bounds(self):
        p = MlpParams.init([(16, 4), (4, 2)], rng=np.random.default_rng(0))
        assert np.all(np.abs(p.weights[0]) <= 1 / 4)
        assert np.all(np.abs(p.weights[1]) <= 1 / 2)

    def test_bad_chain_reports_layer(self):
        with pytest.raises(ShapeError) as exc:
            MlpParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
        assert exc.value.layer == 1

    def test_output_layer_cannot_be_modulated(self):
        with pytest.raises(ShapeError):
            MlpParams.init([(3, 4), (4, 2)], modulated_layers=(1,))

    def test_copy_is_independent(self, mlp):
        c = mlp.copy()
        c.weights[0][0, 0] += 1.0
        assert c.weights[0][0, 0] != mlp.weights[0][0, 0]


class TestForward:

    def test_matches_manual(self, mlp, rng):
        x = rng.standard_normal((4, 5))
        h = np.maximum(x @ mlp.weights[0] + mlp.biases[0], 0)
        h = np.maximum(h @ mlp.weights[1] + mlp.biases[1], 0)
        expected = h @ mlp.weights[2] + mlp.biases[2]
        np.testing.assert_allclose(mlp_forward(mlp, x), expected, rtol=1e-12)

    def test_vector_input(self, mlp, rng):
        x = rng.standard_normal(5)
        out = mlp_forward(mlp, x)
        assert out.shape == (3,)
        np.testing.assert_allclose(out, mlp_forward(mlp, x[None, :])[0], rtol=1e-12)

    def test_input_width_mismatch(self, mlp):
        with pytest.raises(ShapeError):
            mlp_forward(mlp, np.zeros((2, 4)))

    def test_zero_modulation_is_plain_forward(self, mlp, rng):
        x = rng.standard_normal((6, 5))
        mods = FilmParams.zeros(mlp, batch=6)
        np.testing.assert_array_equal(mlp_forward_modulated(mlp, x, mods), mlp_forward(mlp, x))

    def test_shared_and_per_row_mods_agree(self, mlp, rng):
        x = rng.standard_normal((3, 5))
        alpha = [rng.standard_normal(7) for _ in range(2)]
        beta = [rng.standard_normal(7) for _ in range(2)]
        shared = mlp_forward_modulated(mlp, x, FilmParams(alpha, beta))
        rows = FilmParams([np.tile(a, (3, 1)) for a in alpha], [np.tile(b, (3, 1)) for b in beta])
        np.testing.assert_array_equal(shared, mlp_forward_modulated(mlp, x, rows))

    def test_modulation_arity(self, mlp):
        mods = FilmParams([np.zeros(7)], [np.zeros(7)])
        with pytest.raises(ModulationArityError):
            mlp_forward_modulated(mlp, np.zeros(5), mods)

    def test_film_apply(self):
        h = np.array([1.0, -2.0])
        np.testing.assert_array_equal(film_apply(h, np.zeros(2), np.zeros(2)), h)
        np.testing.assert_array_equal(film_apply(h, np.array([1.0, 0.5]), np.array([0.0, 1.0])),
                                      [2.0, -2.0])
        with pytest.raises(ShapeError):
            film_apply(h, np.zeros(3), np.zeros(2))

    def test_counter(self, mlp, rng):
        counter = MacCounter()
        mlp_forward_modulated(mlp, rng.standard_normal((4, 5)), FilmParams.zeros(mlp), counter)
        assert counter.linear == 4 * (5 * 7 + 7 * 7 + 7 * 3)
        assert counter.film == 4 * (7 + 7)


class TestBackward:

    def test_matches_finite_differences(self, mlp, rng):
        x = rng.standard_normal((4, 5))
        mods = FilmParams([0.3 * rng.standard_normal((4, 7)) for _ in range(2)],
                          [0.3 * rng.standard_normal((4, 7)) for _ in range(2)])
        r = rng.standard_normal((4, 3))
        out, tape = mlp_forward_modulated(mlp, x, mods, record=True)
        grads, grad_in, film_grads = mlp_backward(tape, mlp, r)

        loss = lambda: float(np.sum(mlp_forward_modulated(mlp, x, mods) * r))
        for arr, g in zip(mlp.arrays(), grads.arrays()):
            np.testing.assert_allclose(g, _numeric_grad(loss, arr), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(grad_in, _numeric_grad(loss, x), rtol=1e-5, atol=1e-7)
        for k in range(2):
            np.testing.assert_allclose(film_grads.alpha[k], _numeric_grad(loss, mods.alpha[k]),
                                       rtol=1e-5, atol=1e-7)
            np.testing.assert_allclose(film_grads.beta[k], _numeric_grad(loss, mods.beta[k]),
                                       rtol=1e-5, atol=1e-7)

    def test_shared_mod_grads_reduced(self, mlp, rng):
        x = rng.standard_normal((4, 5))
        mods = FilmParams.zeros(mlp)
        _, tape = mlp_forward_modulated(mlp, x, mods, record=True)
        _, _, film_grads = mlp_backward(tape, mlp, np.ones((4, 3)))
        assert film_grads.alpha[0].shape == (7,)

    def test_relu_subgradient_at_zero(self):
        p = MlpParams([np.array([[1.0]]), np.array([[2.0]])], [np.zeros(1), np.zeros(1)])
        _, tape = mlp_forward(p, np.array([[0.0]]), record=True)
        grads, grad_in, _ = mlp_backward(tape, p, np.array([[1.0]]))
        assert grad_in[0, 0] == 0.0
        assert grads.weights[0][0, 0] == 0.0

    def test_identity_activation(self, rng):
        p = MlpParams.init([(3, 4), (4, 2)], rng=rng, activation='identity')
        x = rng.standard_normal((2, 3))
        expected = (x @ p.weights[0] + p.biases[0]) @ p.weights[1] + p.biases[1]
        np.testing.assert_allclose(mlp_forward(p, x), expected, rtol=1e-12)

    def test_stale_tape(self, mlp, rng):
        _, tape = mlp_forward(mlp, rng.standard_normal((2, 5)), record=True)
        mlp.version += 1
        with pytest.raises(StaleTapeError):
            mlp_backward(tape, mlp, np.ones((2, 3)))

    def test_tape_from_other_params(self, mlp, rng):
        _, tape = mlp_forward(mlp, rng.standard_normal((2, 5)), record=True)
        with pytest.raises(StaleTapeError):
            mlp_backward(tape, mlp.copy(), np.ones((2, 3)))
