"""
Tests de l'entrainement: bicubique, tirage des exemples, perte, Adam,
boucle d'entrainement et audit des gradients.
"""

import math

import numpy as np
import pandas as pd
import pytest

import trainer
from config import TestingConfig
from decoder import decode_c2f, decode_vanilla
from encoder import encode
from errors import DataError, DomainError, NumericError, ShapeError
from models import attach_ablation_mlps, build_model
from trainer import (AdamState, TrainConfig, adam_step, bicubic_downsample, bicubic_resize, cubic,
                     cubic_weights, draw_scale, forward, forward_backward, gradient_audit, l1_loss,
                     learning_rate, psnr, reconstruct, sample_training_batch, save_loss_curve, train)


def _smooth_image(h, w):
    y, x = np.mgrid[0:h, 0:w] / max(h, w)
    return np.stack([0.5 + 0.4 * np.sin(3 * x), 0.5 + 0.4 * np.cos(2 * y), 0.3 + 0.5 * x * y],
                    axis=2)


@pytest.fixture
def audit_sample(rng):
    cfg = TrainConfig(patch=4, scale_min=2.0, scale_max=2.0, pixels_per_patch=16)
    return sample_training_batch([rng.random((12, 12, 3))], cfg, rng)[0]


class TestBicubic:

    @pytest.mark.parametrize('x,expected', [(0.0, 1.0), (0.5, 0.5625), (1.0, 0.0), (1.5, -0.0625),
                                            (2.0, 0.0), (3.0, 0.0)])
    def test_kernel(self, x, expected):
        assert float(cubic(np.array(x))) == pytest.approx(expected, abs=1e-15)

    def test_rows_sum_to_one(self):
        for n_in, n_out in ((4, 8), (9, 3), (5, 5), (7, 2)):
            np.testing.assert_allclose(cubic_weights(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)

    def test_interior_reproduces_ramp(self):
        ramp = np.arange(4, dtype=np.float64).reshape(4, 1, 1)
        out = bicubic_resize(ramp, 8, 1)[:, 0, 0]
        # centres de sortie t_j = (j + 0.5) / 2 - 0.5 dans la grille d'entree
        np.testing.assert_allclose(out[3:5], [1.25, 1.75], atol=1e-12)

    def test_same_size_is_copy(self, rng):
        img = rng.random((3, 4, 2))
        out = bicubic_resize(img, 3, 4)
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_constant_preserved(self):
        img = np.full((9, 7, 3), 0.42)
        np.testing.assert_allclose(bicubic_resize(img, 4, 3), 0.42, atol=1e-14)

    def test_downsample_size(self, rng):
        assert bicubic_downsample(rng.random((7, 5, 3)), 2).shape == (4, 3, 3)
        assert bicubic_downsample(rng.random((8, 8, 1)), 2.5).shape == (3, 3, 1)

    def test_errors(self, rng):
        with pytest.raises(DomainError):
            bicubic_downsample(rng.random((4, 4, 3)), 0.5)
        with pytest.raises(DomainError):
            bicubic_downsample(rng.random((2, 2, 3)), 8)
        with pytest.raises(ShapeError):
            bicubic_resize(rng.random((4, 4)), 2, 2)


class TestSampling:

    def test_shape_law(self, rng):
        cfg = TrainConfig(patch=4, scale_min=1.0, scale_max=3.0, batch=16)
        for sample in sample_training_batch([rng.random((20, 20, 3))], cfg, rng):
            side = math.floor(4 * sample.scale + 0.5)
            assert sample.lr_patch.shape == (4, 4, 3)
            assert sample.coords.shape == (16, 2)
            assert sample.targets.shape == (16, 3)
            assert sample.cell.cell_h == pytest.approx(2.0 / side)
            assert np.all(np.abs(sample.coords) < 1.0)

    def test_unit_scale_keeps_crop(self, rng):
        cfg = TrainConfig(patch=4, scale_min=1.0, scale_max=1.0, pixels_per_patch=16)
        sample = sample_training_batch([rng.random((4, 4, 3))], cfg, rng)[0]
        assert sample.scale == 1.0
        rows = np.floor((sample.coords[:, 0] + 1) * 2).astype(int)
        cols = np.floor((sample.coords[:, 1] + 1) * 2).astype(int)
        np.testing.assert_array_equal(sample.targets, sample.lr_patch[rows, cols])

    def test_scale_distribution(self, rng):
        cfg = TrainConfig(scale_min=1.0, scale_max=4.0)
        draws = np.sort([draw_scale(cfg, rng) for _ in range(50_000)])
        ecdf = np.arange(1, len(draws) + 1) / len(draws)
        assert np.max(np.abs(ecdf - (draws - 1.0) / 3.0)) < 0.02

    def test_too_small_images_skipped(self, rng, caplog):
        cfg = TrainConfig(patch=4, scale_min=2.0, scale_max=2.0, batch=3)
        assert sample_training_batch([rng.random((5, 5, 3))], cfg, rng) == []
        assert 'trop petite' in caplog.text

    def test_dataset_not_mutated(self, rng):
        dataset = [rng.random((10, 12, 3)) for _ in range(2)]
        before = [img.copy() for img in dataset]
        cfg = TrainConfig(patch=4, scale_min=1.0, scale_max=2.5, batch=8, flips=True)
        for sample in sample_training_batch(dataset, cfg, rng):
            sample.targets += 1.0
            sample.lr_patch += 1.0
        for img, ref in zip(dataset, before):
            np.testing.assert_array_equal(img, ref)

    def test_empty_dataset(self, rng):
        with pytest.raises(DataError):
            sample_training_batch([], TrainConfig(), rng)


class TestLossAndOptimizer:

    def test_l1(self):
        loss, grad = l1_loss(np.array([[1.0, 2.0]]), np.array([[0.0, 2.0]]))
        assert loss == 0.5
        np.testing.assert_array_equal(grad, [[0.5, 0.0]])
        with pytest.raises(ShapeError):
            l1_loss(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_psnr(self):
        a = np.zeros((2, 2, 3))
        assert psnr(a, a) == math.inf
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_adam_two_steps(self):
        p = np.array([1.0])
        state = AdamState.zeros([p])
        adam_step([p], [np.array([0.5])], state, lr=0.1, t=1)
        assert p[0] == pytest.approx(0.900000002, abs=1e-6)
        adam_step([p], [np.array([0.25])], state, lr=0.1, t=2)
        assert p[0] == pytest.approx(0.806782038, abs=1e-6)

    def test_adam_errors(self):
        p = np.zeros(2)
        state = AdamState.zeros([p])
        with pytest.raises(DomainError):
            adam_step([p], [np.zeros(2)], state, lr=0.1, t=0)
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(3)], state, lr=0.1, t=1)

    def test_learning_rate_decay(self):
        cfg = TrainConfig(lr=1.0, decay_every=2, decay_factor=0.5)
        assert [learning_rate(cfg, s) for s in (1, 2, 3, 5)] == [1.0, 1.0, 0.5, 0.25]

    def test_config(self):
        with pytest.raises(DomainError):
            TrainConfig(scale_min=0.5)
        with pytest.raises(DomainError):
            TrainConfig(scale_min=3.0, scale_max=2.0)
        cfg = TrainConfig.from_config(TestingConfig, steps=5, lr=None)
        assert (cfg.steps, cfg.patch, cfg.lr) == (5, 8, TestingConfig.TRAIN_LR)


class TestGradients:

    def test_gradient_order(self, tiny_model, audit_sample):
        loss, grads, pred = forward_backward(tiny_model, audit_sample)
        arrays = tiny_model.trainable_arrays()
        assert len(grads) == len(arrays)
        assert all(g.shape == a.shape for g, a in zip(grads, arrays))
        assert pred.shape == (16, 3)
        assert loss > 0

    def test_audit(self, tiny_model, audit_sample, rng):
        result = gradient_audit(tiny_model, audit_sample, n_params=200, rng=rng)
        assert result.checked + result.kinked == 200
        assert result.checked > 150
        assert result.max_rel_error <= 1e-4

    @pytest.mark.parametrize('mode', ['shift_only', 'scale_only'])
    def test_audit_ablation_modes(self, audit_sample, rng, mode):
        model = build_model('tiny', seed=2, modulation=mode)
        result = gradient_audit(model, audit_sample, n_params=60, rng=rng)
        assert result.max_rel_error <= 1e-4

    def test_audit_leaves_parameters(self, tiny_model, audit_sample, rng):
        before = [a.copy() for a in tiny_model.trainable_arrays()]
        gradient_audit(tiny_model, audit_sample, n_params=20, rng=rng)
        for a, b in zip(tiny_model.trainable_arrays(), before):
            np.testing.assert_array_equal(a, b)

    def test_relative_error_uses_larger_magnitude(self, tiny_model, audit_sample, rng, monkeypatch):
        exact = trainer.forward_backward

        def doubled(model, sample, decoder='lmf'):
            loss, grads, pred = exact(model, sample, decoder)
            return loss, [2.0 * g for g in grads], pred

        monkeypatch.setattr(trainer, 'forward_backward', doubled)
        result = gradient_audit(tiny_model, audit_sample, n_params=50, rng=rng)
        assert result.max_rel_error == pytest.approx(0.5, abs=1e-3)


@pytest.fixture
def ablation_model():
    model = build_model('tiny', seed=6)
    attach_ablation_mlps(model, 'vanilla', seed=1, d_h=8, k=3)
    attach_ablation_mlps(model, 'c2f', seed=2, d_l=8, d_h=8, k_r=3)
    return model


def _grid_positions(coords, side):
    """Ligne et colonne de chaque centre de pixel d'une grille side x side."""
    pos = np.rint((coords + 1.0) * side / 2.0 - 0.5).astype(int)
    return pos[:, 0], pos[:, 1]


class TestAblationDecoders:

    @pytest.fixture
    def full_sample(self, rng):
        cfg = TrainConfig(patch=4, scale_min=2.0, scale_max=2.0, pixels_per_patch=64)
        return sample_training_batch([rng.random((12, 12, 3))], cfg, rng)[0]

    def test_forward_matches_inference(self, ablation_model, full_sample):
        fm = encode(ablation_model.encoder, full_sample.lr_patch)
        rows, cols = _grid_positions(full_sample.coords, 8)
        vanilla = decode_vanilla(fm, 8, 8, ablation_model.vanilla_mlp)
        c2f = decode_c2f(fm, 8, 8, ablation_model.c2f_latent, ablation_model.c2f_render)
        for decoder, full in (('vanilla', vanilla), ('c2f', c2f)):
            state = forward(ablation_model, full_sample, decoder)
            np.testing.assert_allclose(state.pred, full[rows, cols], rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize('decoder', ['vanilla', 'c2f'])
    def test_gradient_order(self, ablation_model, audit_sample, decoder):
        _, grads, _ = forward_backward(ablation_model, audit_sample, decoder)
        arrays = ablation_model.trainable_arrays(decoder)
        assert len(grads) == len(arrays)
        assert all(g.shape == a.shape for g, a in zip(grads, arrays))

    @pytest.mark.parametrize('decoder', ['vanilla', 'c2f'])
    def test_audit(self, ablation_model, audit_sample, rng, decoder):
        result = gradient_audit(ablation_model, audit_sample, n_params=120, rng=rng,
                                decoder=decoder)
        assert result.checked > 60
        assert result.max_rel_error <= 1e-4

    def test_missing_decoder(self, tiny_model, audit_sample):
        with pytest.raises(ShapeError):
            forward_backward(tiny_model, audit_sample, 'vanilla')
        with pytest.raises(DomainError):
            TrainConfig(decoder='edsr')

    def test_train_updates_only_selected_decoder(self):
        model = build_model('tiny', seed=8)
        cfg = TrainConfig(patch=4, scale_min=1.0, scale_max=2.0, steps=3, pixels_per_patch=16,
                          seed=3, decoder='c2f')
        lmf_before = [a.copy() for a in model.latent_mlp.arrays() + model.render_mlp.arrays()]
        model, curve = train(model, [_smooth_image(12, 12)], cfg)
        assert model.c2f_latent is not None and model.vanilla_mlp is None
        assert model.metadata['decoder'] == 'c2f'
        assert len(curve) == 3 and np.all(np.isfinite(curve['loss']))
        for a, b in zip(model.latent_mlp.arrays() + model.render_mlp.arrays(), lmf_before):
            np.testing.assert_array_equal(a, b)
        fresh = build_model('tiny', seed=8)
        attach_ablation_mlps(fresh, 'c2f', seed=3)
        assert not np.array_equal(model.c2f_render.weights[0], fresh.c2f_render.weights[0])


class TestTrain:

    def _cfg(self, **kwargs):
        values = dict(patch=4, scale_min=1.0, scale_max=2.0, steps=4, pixels_per_patch=16, seed=3)
        values.update(kwargs)
        return TrainConfig(**values)

    def test_zero_learning_rate(self, tiny_model):
        before = [a.copy() for a in tiny_model.trainable_arrays()]
        train(tiny_model, [_smooth_image(12, 12)], self._cfg(lr=0.0))
        for a, b in zip(tiny_model.trainable_arrays(), before):
            np.testing.assert_array_equal(a, b)

    def test_nan_loss_raises(self, tiny_model):
        tiny_model.render_mlp.biases[-1][0] = np.nan
        with pytest.raises(NumericError):
            train(tiny_model, [_smooth_image(12, 12)], self._cfg())

    def test_deterministic(self):
        data = [_smooth_image(12, 12), _smooth_image(10, 14)]
        a, curve_a = train(build_model('tiny', seed=5), data, self._cfg())
        b, curve_b = train(build_model('tiny', seed=5), data, self._cfg())
        pd.testing.assert_frame_equal(curve_a, curve_b)
        for x, y in zip(a.trainable_arrays(), b.trainable_arrays()):
            np.testing.assert_array_equal(x, y)
        assert a.metadata['steps'] == 4

    def test_loss_curve_csv(self, tiny_model, tmp_path):
        _, curve = train(tiny_model, [_smooth_image(12, 12)], self._cfg(steps=3))
        path = tmp_path / 'loss.csv'
        save_loss_curve(curve, str(path))
        loaded = pd.read_csv(path)
        assert list(loaded.columns) == ['step', 'loss', 'lr']
        assert loaded['step'].tolist() == [1, 2, 3]

    def test_reconstruct(self, tiny_model):
        lr, sr = reconstruct(tiny_model, _smooth_image(8, 8), 2)
        assert lr.shape == (4, 4, 3)
        assert sr.shape == (8, 8, 3)
        with pytest.raises(ShapeError):
            reconstruct(tiny_model, _smooth_image(8, 8), 3)
