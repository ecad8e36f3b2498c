from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from apps.numeric import ops
from apps.numeric.exceptions import NonFiniteError, ShapeError
from apps.numeric.gradcheck import gradient_errors
from apps.numeric.rng import Rng
from apps.vce.attention import (
    CueHeatmap, aggregate_levels, attention_weights, cue_target, deform_attn_level, fit_vce, fuse_residual,
    vce_cue, vce_forward,
)
from apps.vce.params import VceConfig, count_vce_params, init_vce
from apps.vce.pyramid import FeaturePyramid, patch_mask, synthetic_pyramid


def _pyramid(levels=2, height=4, width=5, channels=3, seed=0):
    rng = Rng(seed).child('pyramid')
    return FeaturePyramid([rng.child(level).normal((height, width, channels)) for level in range(levels)])


def _layer_norm(values, eps):
    centred = values - values.mean(axis=-1, keepdims=True)
    return centred / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)


class PyramidTests(SimpleTestCase):
    def test_rejects_mismatched_levels(self):
        with self.assertRaises(ShapeError):
            FeaturePyramid([np.zeros((2, 2, 3)), np.zeros((2, 3, 3))])
        with self.assertRaises(ShapeError):
            FeaturePyramid([])
        with self.assertRaises(ShapeError):
            FeaturePyramid([np.zeros((2, 2))])

    def test_rejects_non_finite_levels(self):
        level = np.zeros((2, 2, 3))
        level[0, 0, 0] = np.inf
        with self.assertRaises(NonFiniteError):
            FeaturePyramid([level])

    def test_anchor_and_positions(self):
        pyramid = _pyramid(levels=3)
        self.assertIs(pyramid.anchor, pyramid.levels[-1])
        positions = pyramid.grid_positions()
        self.assertEqual(positions.shape, (20, 2))
        np.testing.assert_array_equal(positions[6], [1, 1])

    def test_patch_mask(self):
        mask = patch_mask(8, 8, (2, 3), 2)
        self.assertEqual(mask.sum(), 4)
        self.assertTrue(mask[3, 4])
        with self.assertRaises(ShapeError):
            patch_mask(8, 8, (7, 7), 2)

    def test_synthetic_pyramid_is_deterministic(self):
        first = synthetic_pyramid(seed=3, channels=4, levels=2)
        second = synthetic_pyramid(seed=3, channels=4, levels=2)
        np.testing.assert_array_equal(first.pyramid.anchor.data, second.pyramid.anchor.data)
        self.assertAlmostEqual(float(np.linalg.norm(first.cue_direction)), 1.0, places=12)


class AttentionTests(SimpleTestCase):
    def test_zero_init_samples_the_anchor(self):
        pyramid = _pyramid()
        params = init_vce(VceConfig(levels=2, heads=2, points=3, channels=3), Rng(1))
        feature = pyramid.levels[0].data[2, 3]
        expected = sum(value.data @ feature for value in params.value[0])
        np.testing.assert_allclose(deform_attn_level(pyramid.levels[0], (2, 3), params, 0).data, expected,
                                   atol=1e-12)
        np.testing.assert_allclose(attention_weights(pyramid.levels[0], (2, 3), params, 0), np.full((2, 3), 1 / 3))

    @hypothesis_settings(max_examples=20, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 4), st.integers(0, 1000))
    def test_attention_weights_lie_on_the_simplex(self, row, col, seed):
        pyramid = _pyramid(seed=seed)
        params = init_vce(VceConfig(levels=2, heads=2, points=4, channels=3), Rng(seed), offset_scale=1.0)
        weights = attention_weights(pyramid.levels[1], (row, col), params, 1)
        self.assertTrue(np.all(weights >= 0))
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_anchor_outside_grid(self):
        params = init_vce(VceConfig(levels=2, heads=1, points=1, channels=3), Rng(0))
        with self.assertRaises(ShapeError):
            deform_attn_level(_pyramid().levels[0], (4, 0), params, 0)

    def test_large_offsets_stay_finite(self):
        pyramid = _pyramid()
        params = init_vce(VceConfig(levels=2, heads=2, points=2, channels=3), Rng(2), offset_scale=50.0)
        self.assertTrue(vce_cue(pyramid, params).is_finite())

    def test_aggregate_levels_width_check(self):
        with self.assertRaises(ShapeError):
            aggregate_levels([np.ones(3), np.ones(3)], np.ones((3, 5)))

    def test_fuse_residual_with_zero_gamma(self):
        anchor = Rng(3).normal((2, 2, 4))
        fused = fuse_residual(anchor, Rng(4).normal((2, 2, 4)), 0.0, np.ones(4), np.zeros(4), 1e-5)
        np.testing.assert_allclose(fused.data, _layer_norm(anchor, 1e-5), atol=1e-12)


class ForwardTests(SimpleTestCase):
    def test_zero_output_projection_gives_normalised_anchor(self):
        pyramid = _pyramid()
        params = init_vce(VceConfig(levels=2, heads=2, points=2, channels=3), Rng(5), zero_output=True)
        enhanced, heatmap = vce_forward(pyramid, params)
        np.testing.assert_allclose(enhanced.data, _layer_norm(pyramid.anchor.data, params.eps), atol=1e-12)
        np.testing.assert_array_equal(heatmap.values, np.zeros((4, 5)))

    def test_heatmap_is_the_cue_norm(self):
        pyramid = _pyramid()
        params = init_vce(VceConfig(levels=2, heads=2, points=2, channels=3), Rng(6), offset_scale=0.5)
        cue = vce_cue(pyramid, params).data
        _, heatmap = vce_forward(pyramid, params)
        np.testing.assert_allclose(heatmap.values, np.sqrt((cue ** 2).sum(axis=-1)), atol=1e-12)

    def test_level_count_mismatch(self):
        params = init_vce(VceConfig(levels=3, heads=1, points=1, channels=3), Rng(0))
        with self.assertRaises(ShapeError):
            vce_forward(_pyramid(levels=2), params)

    def test_heatmap_helpers(self):
        heatmap = CueHeatmap(np.array([[0.0, 2.0], [1.0, 0.5]]))
        self.assertEqual(heatmap.argmax(), (0, 1))
        np.testing.assert_allclose(heatmap.normalized(), [[0.0, 1.0], [0.5, 0.25]])
        np.testing.assert_array_equal(CueHeatmap(np.ones((2, 2))).normalized(), np.zeros((2, 2)))

    def test_gradients_match_finite_differences(self):
        pyramid = _pyramid(levels=2, height=3, width=3, channels=4, seed=7)
        params = init_vce(VceConfig(levels=2, heads=2, points=2, channels=4), Rng(7), offset_scale=0.3)
        weights = Rng(8).normal((3, 3, 4))

        def loss():
            return ops.sum(ops.mul(vce_forward(pyramid, params)[0], weights))

        for name, error in gradient_errors(loss, params.trainable(), h=1e-6).items():
            self.assertLess(error, 1e-4, name)


class SizeTests(SimpleTestCase):
    def test_default_size(self):
        size = count_vce_params(VceConfig())
        self.assertEqual(size.parameters, 15424)
        self.assertEqual(size.bytes, 30848)
        self.assertAlmostEqual(size.megabytes, 30848 / 2 ** 20)

    def test_count_matches_initialised_tensors(self):
        config = VceConfig(levels=3, heads=2, points=3, channels=5)
        params = init_vce(config, Rng(0))
        self.assertEqual(count_vce_params(config).parameters, sum(t.size for t in params.trainable().values()))

    def test_invalid_config(self):
        with self.assertRaises(ShapeError):
            VceConfig(points=0)


class FitTests(SimpleTestCase):
    def test_fit_reduces_loss(self):
        scene = synthetic_pyramid(height=5, width=5, channels=6, levels=2, patch=(1, 1), seed=0)
        params = init_vce(VceConfig(levels=2, heads=1, points=2, channels=6), Rng(0), zero_output=True)
        target = cue_target(scene.pyramid, scene.mask, scene.cue_direction)
        losses = fit_vce(scene.pyramid, params, target, steps=30, lr=0.5)
        self.assertEqual(len(losses), 30)
        self.assertLess(losses[-1], losses[0])

    @skipUnless(settings.RUN_EXPERIMENTS, 'long experiment; set DUALLORA_RUN_EXPERIMENTS=true')
    def test_heatmap_argmax_inside_planted_patch(self):
        for seed in range(5):
            scene = synthetic_pyramid(seed=seed)
            params = init_vce(VceConfig(), Rng(seed).child('vce_demo'), zero_output=True)
            fit_vce(scene.pyramid, params, cue_target(scene.pyramid, scene.mask, scene.cue_direction))
            row, col = vce_forward(scene.pyramid, params)[1].argmax()
            self.assertTrue(scene.mask[row, col], (seed, row, col))
