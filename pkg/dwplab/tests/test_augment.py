import numpy as np
from django.conf import settings as lab_settings
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from dwplab.architectures import build_architecture
from dwplab.augment import (
    ErosionParams, compute_prunable_indicator, dsne_augment, ghost_augment, prunable_count, prune_weights,
    sample_prune_mask,
)
from dwplab.exceptions import ConfigError, RejectedInputError
from dwplab.models import forward

from .helpers import SHAPE, linear_model, make_model


def kernel_values(model):
    return np.concatenate([p.value.ravel() for name, p in sorted(model.params.items()) if p.prunable])


class PrunableIndicatorTests(SimpleTestCase):

    def setUp(self):
        self.model = build_architecture('small_vgg', SHAPE, 10, seed=0)

    def test_count_is_floor_of_rate_times_kappa(self):
        for r in (0.0, 0.35, 0.7, 1.0):
            with self.subTest(r=r):
                indicator = compute_prunable_indicator(self.model, r)
                self.assertEqual(indicator.count, prunable_count(r, indicator.kappa))
                self.assertEqual(indicator.count, int(np.floor(r * indicator.kappa + 1e-9)))

    def test_prunable_weights_are_the_smallest(self):
        indicator = compute_prunable_indicator(self.model, 0.5)
        magnitudes = np.abs(kernel_values(self.model))
        flags = np.concatenate([indicator.masks[name].ravel() for name in sorted(indicator.masks)])
        self.assertLessEqual(magnitudes[flags].max(), magnitudes[~flags].min())
        self.assertEqual(indicator.gamma, magnitudes[flags].max())

    def test_biases_are_never_marked(self):
        indicator = compute_prunable_indicator(self.model, 1.0)
        self.assertTrue(all(name.endswith('.weight') for name in indicator.masks))

    def test_ties_break_by_name_then_index(self):
        values = {'a.weight': np.ones((2, 2)), 'b.weight': np.ones((2, 2)),
                  'a.bias': np.zeros(2), 'b.bias': np.zeros(2)}
        model = make_model('tied', (), values, (1, 8, 8), 2)
        indicator = compute_prunable_indicator(model, 0.75)
        self.assertEqual(indicator.count, 6)
        self.assertTrue(indicator.masks['a.weight'].all())
        np.testing.assert_array_equal(indicator.masks['b.weight'].ravel(), [True, True, False, False])

    def test_rate_out_of_range(self):
        with self.assertRaises(RejectedInputError):
            compute_prunable_indicator(self.model, 1.5)


class PruneMaskTests(SimpleTestCase):

    def setUp(self):
        self.model = build_architecture('small_vgg', SHAPE, 10, seed=0)
        self.indicator = compute_prunable_indicator(self.model, 0.7)

    def test_same_label_same_mask(self):
        a = sample_prune_mask(self.indicator, 0.5, (0, 'dwp', 0, 3))
        b = sample_prune_mask(self.indicator, 0.5, (0, 'dwp', 0, 3))
        c = sample_prune_mask(self.indicator, 0.5, (0, 'dwp', 0, 4))
        for name in a.bits:
            np.testing.assert_array_equal(a.bits[name], b.bits[name])
        self.assertFalse(all(np.array_equal(a.bits[n], c.bits[n]) for n in a.bits))

    def test_probability_bounds(self):
        zero = sample_prune_mask(self.indicator, 0.0, (1,))
        one = sample_prune_mask(self.indicator, 1.0, (1,))
        self.assertEqual(zero.count, 0)
        self.assertEqual(one.count, self.indicator.kappa)

    def test_mean_pruned_fraction_and_untouched_weights(self):
        kappa = self.indicator.kappa
        self.assertGreaterEqual(kappa, 10000)
        base = kernel_values(self.model)
        protected = ~np.concatenate([self.indicator.masks[n].ravel() for n in sorted(self.indicator.masks)])
        fractions = []
        for k in range(1000):
            view = prune_weights(self.model, self.indicator, sample_prune_mask(self.indicator, 0.5, (0, 'stat', k)))
            pruned = kernel_values(view)
            fractions.append(np.count_nonzero(pruned != base) / kappa)
            if k % 100 == 0:
                np.testing.assert_array_equal(pruned[protected], base[protected])
        self.assertAlmostEqual(float(np.mean(fractions)), 0.35, delta=0.015)

    def test_r_zero_changes_nothing(self):
        indicator = compute_prunable_indicator(self.model, 0.0)
        view = prune_weights(self.model, indicator, sample_prune_mask(indicator, 1.0, (0,)))
        self.assertEqual(dict(view.overrides), {})

    def test_full_pruning_leaves_bias_only_logits(self):
        model = linear_model()
        indicator = compute_prunable_indicator(model, 1.0)
        view = prune_weights(model, indicator, sample_prune_mask(indicator, 1.0, (0,)))
        x = np.random.default_rng(0).random((2, 1, 4, 4))
        np.testing.assert_array_equal(forward(view, x).data,
                                      np.broadcast_to(model.params['fc.bias'].value, (2, 3)))

    def test_pruning_a_view_again_is_idempotent(self):
        mask = sample_prune_mask(self.indicator, 0.5, (2,))
        once = prune_weights(self.model, self.indicator, mask)
        twice = prune_weights(once, self.indicator, mask)
        for name in once.overrides:
            np.testing.assert_array_equal(once.overrides[name], twice.overrides[name])

    def test_misaligned_mask_is_rejected(self):
        other = compute_prunable_indicator(build_architecture('small_conv', SHAPE, 10), 0.5)
        with self.assertRaises(RejectedInputError):
            prune_weights(self.model, other, sample_prune_mask(other, 0.5, (0,)))

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_only_prunable_weights_ever_change(self, r, p, seed):
        model = linear_model(seed=1)
        indicator = compute_prunable_indicator(model, r)
        view = prune_weights(model, indicator, sample_prune_mask(indicator, p, (seed,)))
        before, after = model.params['fc.weight'].value, view.params['fc.weight'].value
        changed = before != after
        self.assertFalse(np.any(changed & ~indicator.masks['fc.weight']))
        self.assertTrue(np.all(after[changed] == 0))
        np.testing.assert_array_equal(view.params['fc.bias'].value, model.params['fc.bias'].value)


class ErosionTests(SimpleTestCase):

    def setUp(self):
        self.model = build_architecture('small_res', SHAPE, 10, seed=0)
        self.x = np.random.default_rng(0).random((4,) + SHAPE).astype(np.float32)

    def test_params_validation(self):
        with self.assertRaises(ConfigError):
            ErosionParams(mode='gn', drop_rate=1.0)
        with self.assertRaises(ConfigError):
            ErosionParams(mode='dsne', bias_gamma=0.0)
        with self.assertRaises(ConfigError):
            ErosionParams(mode='dropout')

    def test_mode_must_match_the_augmenter(self):
        with self.assertRaises(RejectedInputError):
            ghost_augment(self.model, ErosionParams.defaults('dsne'), (0,))
        with self.assertRaises(RejectedInputError):
            dsne_augment(self.model, ErosionParams.defaults('gn'), (0,))

    def test_neutral_params_are_the_identity(self):
        neutral = ErosionParams(mode='gn', drop_rate=0.0, skip_range=0.0)
        view = ghost_augment(self.model, neutral, (0,))
        np.testing.assert_array_equal(forward(view, self.x).data, forward(self.model, self.x).data)

    def test_views_differ_by_label_and_repeat_for_equal_labels(self):
        params = ErosionParams.defaults('gn')
        a = forward(ghost_augment(self.model, params, (0, 'gn', 0, 1)), self.x).data
        b = forward(ghost_augment(self.model, params, (0, 'gn', 0, 1)), self.x).data
        c = forward(ghost_augment(self.model, params, (0, 'gn', 0, 2)), self.x).data
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_batch_permutation_equivariance(self):
        view = dsne_augment(build_architecture('small_vgg', SHAPE, 10, seed=0), ErosionParams.defaults('dsne'), (3,))
        ids = np.array([10, 11, 12, 13])
        order = np.array([2, 0, 3, 1])
        full = forward(view, self.x, sample_ids=ids).data
        permuted = forward(view, self.x[order], sample_ids=ids[order]).data
        np.testing.assert_allclose(permuted, full[order], rtol=1e-6, atol=1e-6)

    def test_dsne_scales_the_residual_branch(self):
        params = ErosionParams.defaults('dsne')
        view = dsne_augment(self.model, params, (0,))
        for name in self.model.skip_block_names():
            skip, gain = view.hooks.skip_factors(name)
            self.assertEqual(gain, params.bias_gamma)
            self.assertTrue(1 - params.skip_range <= skip <= 1 + params.skip_range)

    def test_erosion_keeps_the_weights(self):
        view = ghost_augment(self.model, ErosionParams.defaults('gn'), (0,))
        self.assertEqual(dict(view.overrides), {})

    def test_residual_models_keep_their_activations(self):
        dropout_only = ErosionParams(mode='gn', drop_rate=0.5, skip_range=0.0)
        view = ghost_augment(self.model, dropout_only, (0,))
        np.testing.assert_array_equal(forward(view, self.x).data, forward(self.model, self.x).data)
        scaled_only = ErosionParams(mode='gn', drop_rate=0.0, skip_range=0.2)
        view = ghost_augment(self.model, scaled_only, (0,))
        self.assertFalse(np.array_equal(forward(view, self.x).data, forward(self.model, self.x).data))

    def test_plain_models_are_eroded_after_activations_only(self):
        model = build_architecture('small_vgg', SHAPE, 10, seed=0)
        self.assertEqual(model.skip_block_names(), [])
        for augment, mode in ((ghost_augment, 'gn'), (dsne_augment, 'dsne')):
            with self.subTest(mode=mode):
                view = augment(model, ErosionParams.defaults(mode), (0,))
                self.assertTrue(view.hooks.erode_activations)
                self.assertEqual(view.hooks.factors, {})
                self.assertFalse(np.array_equal(forward(view, self.x).data, forward(model, self.x).data))

    def test_defaults_come_from_settings(self):
        for mode in ('gn', 'dsne'):
            with self.subTest(mode=mode):
                self.assertEqual(ErosionParams.defaults(mode).to_dict(),
                                 dict(lab_settings.EROSION_DEFAULTS[mode], mode=mode))
        changed = dict(lab_settings.EROSION_DEFAULTS, gn=dict(lab_settings.EROSION_DEFAULTS['gn'], drop_rate=0.3))
        with self.settings(EROSION_DEFAULTS=changed):
            self.assertEqual(ErosionParams.defaults('gn').drop_rate, 0.3)
        with self.assertRaises(ConfigError):
            ErosionParams.defaults('dropout')
