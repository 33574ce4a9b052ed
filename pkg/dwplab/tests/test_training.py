import numpy as np
from django.test import SimpleTestCase

from dwplab.architectures import build_architecture
from dwplab.augment import (
    ErosionParams, compute_prunable_indicator, dsne_augment, ghost_augment, prune_weights, sample_prune_mask,
)
from dwplab.data import Dataset
from dwplab.exceptions import ConfigError, RejectedInputError, TrainingError
from dwplab.training import (
    PgdSpec, TrainSpec, adversarial_train, evaluate_accuracy, pgd_perturb, robust_accuracy, train_model,
)

from .helpers import SHAPE, synthetic, trained


class SpecTests(SimpleTestCase):

    def test_train_spec_rejects_bad_values(self):
        for bad in ({'epochs': -1}, {'batch_size': 0}, {'learning_rate': 0}, {'momentum': 1.0}):
            with self.subTest(**bad):
                with self.assertRaises(ConfigError):
                    TrainSpec(**bad)

    def test_pgd_step_may_not_exceed_budget(self):
        with self.assertRaises(ConfigError):
            PgdSpec(steps=3, epsilon_at=0.01, step_size=0.02)

    def test_zero_budget_allows_any_step(self):
        self.assertEqual(PgdSpec(steps=3, epsilon_at=0.0, step_size=0.5).epsilon_at, 0.0)


class TrainModelTests(SimpleTestCase):

    def test_training_beats_chance_and_records_accuracy(self):
        model = trained()
        accuracy = evaluate_accuracy(model, synthetic(200, seed=9))
        self.assertGreater(accuracy, 0.5)
        self.assertIn('train_accuracy', model.metadata)
        self.assertIsNone(model.metadata['adversarial'])

    def test_training_is_deterministic(self):
        data = synthetic(64, seed=2)
        spec = TrainSpec(epochs=1, batch_size=16, learning_rate=0.01, seed=7)
        a = train_model(build_architecture('small_conv', SHAPE, 10), data, spec)
        b = train_model(build_architecture('small_conv', SHAPE, 10), data, spec)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].value, b.params[name].value)

    def test_base_model_is_not_modified(self):
        model = build_architecture('small_conv', SHAPE, 10)
        before = model.params['conv1.weight'].value.copy()
        train_model(model, synthetic(32, seed=3), TrainSpec(epochs=1, batch_size=8))
        np.testing.assert_array_equal(model.params['conv1.weight'].value, before)

    def test_non_finite_loss_raises_with_epoch(self):
        data = synthetic(16, seed=1)
        images = data.images.copy()
        images[0, 0, 0, 0] = np.nan
        broken = Dataset(images, data.labels, data.ids, data.num_classes)
        with self.assertRaises(TrainingError) as ctx:
            train_model(build_architecture('small_conv', SHAPE, 10), broken, TrainSpec(epochs=2, batch_size=16))
        self.assertEqual(ctx.exception.epoch, 0)

    def test_empty_dataset_is_rejected(self):
        empty = synthetic(16).take(0)
        with self.assertRaises(RejectedInputError):
            evaluate_accuracy(build_architecture('small_conv', SHAPE, 10), empty)
        with self.assertRaises(RejectedInputError):
            train_model(build_architecture('small_conv', SHAPE, 10), empty, TrainSpec())


class AdversarialTests(SimpleTestCase):

    def test_pgd_stays_in_budget(self):
        data = synthetic(8, seed=4)
        pgd = PgdSpec(steps=3, epsilon_at=8 / 255, step_size=2.5 * (8 / 255) / 3)
        x = pgd_perturb(trained(), data.images, data.labels, pgd)
        self.assertLessEqual(float(np.max(np.abs(x - data.images))), 8 / 255 + 1e-6)
        self.assertTrue(np.all((x >= 0) & (x <= 1)))

    def test_zero_budget_robust_accuracy_is_clean_accuracy(self):
        data = synthetic(40, seed=5)
        pgd = PgdSpec(steps=2, epsilon_at=0.0, step_size=0.1)
        self.assertEqual(robust_accuracy(trained(), data, pgd), evaluate_accuracy(trained(), data))

    def test_pgd_lowers_accuracy(self):
        data = synthetic(100, seed=6)
        pgd = PgdSpec(steps=3, epsilon_at=0.3, step_size=0.1)
        self.assertLessEqual(robust_accuracy(trained(), data, pgd), evaluate_accuracy(trained(), data))

    def test_adversarial_training_records_its_pgd(self):
        pgd = PgdSpec(steps=1, epsilon_at=0.05, step_size=0.05)
        model = adversarial_train(build_architecture('small_conv', SHAPE, 10), synthetic(32, seed=8),
                                  TrainSpec(epochs=1, batch_size=16), pgd)
        self.assertEqual(model.metadata['adversarial']['steps'], 1)

    def test_zero_budget_adversarial_training_is_natural_training(self):
        data = synthetic(64, seed=2)
        spec = TrainSpec(epochs=1, batch_size=16, learning_rate=0.01, seed=7)
        natural = train_model(build_architecture('small_conv', SHAPE, 10), data, spec)
        robust = adversarial_train(build_architecture('small_conv', SHAPE, 10), data, spec,
                                   PgdSpec(steps=3, epsilon_at=0.0, step_size=0.1))
        for name in natural.params:
            np.testing.assert_array_equal(robust.params[name].value, natural.params[name].value)

    def test_adversarial_training_trades_clean_for_robust_accuracy(self):
        spec = TrainSpec(epochs=4, batch_size=32, learning_rate=0.02, momentum=0.9, seed=0)
        pgd = PgdSpec(steps=3, epsilon_at=0.25, step_size=0.1)
        natural = trained()
        model = build_architecture('small_conv', SHAPE, 10, seed=0)
        robust = adversarial_train(model, synthetic(600, seed=0), spec, pgd)
        held_out = synthetic(200, seed=38)
        self.assertGreater(robust_accuracy(robust, held_out, pgd), robust_accuracy(natural, held_out, pgd))
        self.assertLessEqual(evaluate_accuracy(robust, held_out), evaluate_accuracy(natural, held_out))


class AccuracyTests(SimpleTestCase):

    def setUp(self):
        self.model = trained()
        self.data = synthetic(100, seed=36)

    def test_views_leave_the_base_model_alone(self):
        before = evaluate_accuracy(self.model, self.data)
        snapshot = {name: p.value.copy() for name, p in self.model.params.items()}
        indicator = compute_prunable_indicator(self.model, 0.7)
        views = [prune_weights(self.model, indicator, sample_prune_mask(indicator, 0.5, (0, 'dwp', 0, k)))
                 for k in range(3)]
        views.append(ghost_augment(self.model, ErosionParams.defaults('gn'), (0, 'gn', 0, 0)))
        views.append(dsne_augment(self.model, ErosionParams.defaults('dsne'), (0, 'dsne', 0, 0)))
        for view in views:
            evaluate_accuracy(view, self.data)
        self.assertEqual(evaluate_accuracy(self.model, self.data), before)
        for name, value in snapshot.items():
            np.testing.assert_array_equal(self.model.params[name].value, value)

    def test_accuracy_ignores_sample_order(self):
        order = np.random.default_rng(0).permutation(len(self.data))
        shuffled = Dataset(self.data.images[order], self.data.labels[order], self.data.ids[order],
                           self.data.num_classes)
        self.assertEqual(evaluate_accuracy(self.model, shuffled), evaluate_accuracy(self.model, self.data))
