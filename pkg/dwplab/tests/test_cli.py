import json
import os
import shutil
import tempfile

import numpy as np
from click.testing import CliRunner
from django.test import SimpleTestCase

from dwplab.checkpoint import load_adversarial_batch
from dwplab.cli import main
from dwplab.data import make_synthetic

TINY_RUN = {
    'seed': 0,
    'dataset': {'kind': 'synthetic', 'train_size': 200, 'eval_size': 6, 'shape': [1, 16, 16]},
    'zoo': {
        'architectures': ['small_conv', 'small_vgg'],
        'train': {'epochs': 1, 'batch_size': 32},
        'adversarial': ['small_conv'],
        'pgd': {'steps': 1},
    },
    'attack': {'iters': 2},
    'experiment': {
        'r_grid': [0.0, 1.0],
        'cosine_instances': 2,
        'cosine_images': 2,
        'decay_rate_grid': [0.0, 0.5],
        'masks_per_point': 2,
        'gradcam_images': 1,
    },
}


class CommandLineTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.mkdtemp()
        cls.config_path = os.path.join(cls.tmp, 'run.json')
        config = dict(TINY_RUN, zoo=dict(TINY_RUN['zoo'], checkpoint_dir=os.path.join(cls.tmp, 'checkpoints')))
        with open(cls.config_path, 'w') as f:
            json.dump(config, f)
        result = cls.invoke('train', output_dir=os.path.join(cls.tmp, 'trained'))
        assert result.exit_code == 0, result.stderr
        result = cls.invoke('advtrain', output_dir=os.path.join(cls.tmp, 'advtrain'))
        assert result.exit_code == 0, result.stderr

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    @classmethod
    def invoke(cls, command, output_dir, *options):
        runner = CliRunner(mix_stderr=False)
        args = ['--config', cls.config_path, '--output-dir', output_dir]
        for option in options:
            args += ['--set', option]
        return runner.invoke(main, args + [command], env={'DWP_OUTPUT_DIR': output_dir})

    def out(self, name):
        return os.path.join(self.tmp, name)

    def read(self, *parts):
        with open(os.path.join(*parts), 'rb') as f:
            return f.read()

    def test_train_writes_checkpoints_and_a_manifest(self):
        self.assertTrue(os.path.exists(os.path.join(self.tmp, 'checkpoints', 'small_conv.dwpm')))
        manifest = json.loads(self.read(self.out('trained'), 'train', 'manifest.json'))
        self.assertEqual(manifest['command'], 'train')
        self.assertEqual(manifest['seed'], 0)
        self.assertIn('train/accuracy.csv', manifest['artifacts'])
        self.assertEqual(manifest['config']['attack']['iters'], 2)

    def test_zero_iteration_attack_returns_the_clean_images(self):
        result = self.invoke('attack', self.out('attack0'), 'attack.iters=0')
        self.assertEqual(result.exit_code, 0, result.stderr)
        self.assertEqual(result.output.strip(), os.path.join(self.out('attack0'), 'attack', 'manifest.json'))
        images, ids, targets, echo = load_adversarial_batch(os.path.join(self.out('attack0'), 'attack',
                                                                         'adversarial.dwpm'))
        clean = make_synthetic(6, 10, (1, 16, 16), seed=1).select_ids(ids)
        np.testing.assert_array_equal(images, clean.images)
        self.assertTrue(np.all(targets != clean.labels))
        self.assertEqual(echo['iters'], 0)
        manifest = json.loads(self.read(self.out('attack0'), 'attack', 'manifest.json'))
        self.assertEqual(manifest['summary']['max_linf'], 0.0)

    def test_attack_respects_the_budget(self):
        result = self.invoke('attack', self.out('attack'), 'attack.epsilon=0.05')
        self.assertEqual(result.exit_code, 0, result.stderr)
        manifest = json.loads(self.read(self.out('attack'), 'attack', 'manifest.json'))
        self.assertLessEqual(manifest['summary']['max_linf'], 0.05 + 1e-6)
        self.assertTrue(os.listdir(os.path.join(self.out('attack'), 'attack', 'previews')))

    def test_eval_is_reproducible(self):
        first = self.invoke('eval', self.out('eval_a'))
        second = self.invoke('eval', self.out('eval_b'))
        self.assertEqual((first.exit_code, second.exit_code), (0, 0), first.stderr + second.stderr)
        table = self.read(self.out('eval_a'), 'eval', 'transfer.csv')
        self.assertEqual(table, self.read(self.out('eval_b'), 'eval', 'transfer.csv'))
        lines = table.decode().splitlines()
        self.assertEqual(lines[0], 'white_box_set,black_box_model,augmentation,targeted_success_rate,n_samples,seed')
        self.assertEqual(len(lines), 5)

    def test_missing_checkpoint_is_reported(self):
        output_dir = self.out('missing')
        result = self.invoke('attack', output_dir, f"zoo.checkpoint_dir={os.path.join(self.tmp, 'empty')}")
        self.assertEqual(result.exit_code, 1)
        record = json.loads(self.read(output_dir, 'error.json'))
        self.assertEqual(record['error'], 'MissingArtifactError')
        self.assertTrue(record['path'].endswith('small_conv.dwpm'))
        self.assertEqual(json.loads(result.stderr.strip().splitlines()[-1])['error'], 'MissingArtifactError')

    def test_invalid_configuration_is_reported(self):
        output_dir = self.out('invalid')
        result = self.invoke('eval', output_dir, 'attack.epsilon=-1')
        self.assertEqual(result.exit_code, 1)
        record = json.loads(self.read(output_dir, 'error.json'))
        self.assertEqual((record['error'], record['path']), ('ConfigError', 'attack.epsilon'))

    def test_advtrain_compares_with_the_natural_twin(self):
        self.assertTrue(os.path.exists(os.path.join(self.tmp, 'checkpoints', 'small_conv_adv.dwpm')))
        lines = self.read(self.out('advtrain'), 'advtrain', 'robustness.csv').decode().splitlines()
        self.assertEqual(lines[0], 'arch,variant,clean_accuracy,pgd_accuracy')
        self.assertEqual([line.split(',')[1] for line in lines[1:]], ['natural', 'adversarial'])

    def test_eval_with_a_robust_victim(self):
        roster = 'zoo.architectures=["small_conv", "small_vgg", "small_conv_adv"]'
        result = self.invoke('eval', self.out('eval_robust'), roster)
        self.assertEqual(result.exit_code, 0, result.stderr)
        lines = self.read(self.out('eval_robust'), 'eval', 'transfer.csv').decode().splitlines()
        self.assertEqual(len(lines), 7)
        victims = [line.split(',')[1] for line in lines[1:]]
        self.assertEqual(victims.count('small_conv_adv'), 2)
        rates = [float(line.split(',')[3]) for line in lines[1:]]
        self.assertTrue(all(0 <= rate <= 1 for rate in rates))

    def test_dwp_attack_on_the_robust_twin_respects_the_budget(self):
        output_dir = self.out('attack_robust')
        result = self.invoke('attack', output_dir, 'zoo.architectures=["small_conv", "small_conv_adv"]',
                             'experiment.white_box=["small_conv_adv"]', 'attack.augmentation=dwp',
                             'attack.epsilon=0.05')
        self.assertEqual(result.exit_code, 0, result.stderr)
        manifest = json.loads(self.read(output_dir, 'attack', 'manifest.json'))
        self.assertLessEqual(manifest['summary']['max_linf'], 0.05 + 1e-6)
        self.assertEqual(list(manifest['summary']['white_box_success']), ['small_conv_adv'])

    def test_train_skips_robust_twins(self):
        output_dir = self.out('train_twins')
        result = self.invoke('train', output_dir, 'zoo.architectures=["small_conv_adv"]',
                             f"zoo.checkpoint_dir={os.path.join(self.tmp, 'twins_only')}")
        self.assertEqual(result.exit_code, 0, result.stderr)
        self.assertFalse(os.path.exists(os.path.join(self.tmp, 'twins_only', 'small_conv_adv.dwpm')))

    def test_undecodable_target_file_is_reported(self):
        output_dir = self.out('bad_targets')
        path = os.path.join(self.tmp, 'targets.csv')
        with open(path, 'wb') as f:
            f.write(b'id,true_label,target_label\n0,3,\xff\n')
        result = self.invoke('attack', output_dir, f'dataset.targets={path}')
        self.assertEqual(result.exit_code, 1)
        record = json.loads(self.read(output_dir, 'error.json'))
        self.assertEqual(record['error'], 'TargetFileError')

    def test_diagnostics(self):
        output_dir = self.out('diag')
        for command, artifact in (('ablate-r', 'ablation_r.csv'), ('diag-cosine', 'cosine.csv'),
                                  ('diag-decay', 'decay.csv'), ('diag-gradcam', 'gradcam.csv')):
            with self.subTest(command=command):
                result = self.invoke(command, output_dir, 'attack.iters=1')
                self.assertEqual(result.exit_code, 0, result.stderr)
                self.assertTrue(os.path.exists(os.path.join(output_dir, command, artifact)))
        decay = self.read(output_dir, 'diag-decay', 'decay.csv').decode().splitlines()
        self.assertEqual(len(decay), 5)
        summary = json.loads(self.read(output_dir, 'diag-cosine', 'cosine_summary.json'))
        self.assertIn('offdiag_mean_abs', summary)
