"""
Run configuration: one JSON document per invocation.

    {
      "seed": 0,
      "output_dir": "runs/mnist",
      "dataset": {"kind": "mnist", "path": "data/mnist", ...},
      "zoo": {"architectures": [...], "train": {...}, "adversarial": [...], "pgd": {...}},
      "attack": {"preset": "ni-si-ti-di", "epsilon": 0.0627, ...},
      "experiment": {"white_box": [...], "augmentations": ["none", "dwp"], ...}
    }

Missing values come from the settings module. Unknown keys, wrong types
and invariant violations raise ConfigError with the dotted JSON path.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Tuple

from django.conf import settings

from .architectures import ARCHITECTURES, ROSTER_NAMES
from .attack import AUGMENTATIONS, PRESETS, AttackConfig
from .augment import ErosionParams
from .exceptions import ConfigError
from .kernels import KernelSpec
from .training import PgdSpec, TrainSpec

logger = logging.getLogger(__name__)

DATASET_KINDS = ('synthetic', 'mnist', 'cifar10')


def default_output_dir():
    """DWP_OUTPUT_DIR when set, settings.OUTPUT_DIR otherwise."""
    return os.environ.get('DWP_OUTPUT_DIR') or settings.OUTPUT_DIR


def default_data_dir():
    """DWP_DATA_DIR when set, settings.DATA_DIR otherwise."""
    return os.environ.get('DWP_DATA_DIR') or settings.DATA_DIR


@dataclass(frozen=True)
class DatasetConfig:
    """
    Attributes:
        kind: synthetic, mnist or cifar10
        path: directory of the raw files (default_data_dir() when empty)
        train_size: training samples used (0 = all)
        eval_size: evaluation samples attacked
        num_classes: label range
        shape: synthetic image shape (C, H, W)
        targets: optional target assignment CSV; drawn from the seed otherwise
    """
    kind: str = 'synthetic'
    path: str = ''
    train_size: int = 0
    eval_size: int = 200
    num_classes: int = 10
    shape: Tuple[int, int, int] = (1, 16, 16)
    targets: str = ''


@dataclass(frozen=True)
class ZooConfig:
    architectures: Tuple[str, ...] = ()
    train: TrainSpec = field(default_factory=TrainSpec)
    adversarial: Tuple[str, ...] = ()
    pgd: PgdSpec = field(default_factory=PgdSpec)
    checkpoint_dir: str = ''


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Attributes:
        white_box: ensemble for the single attack command (zoo order when empty)
        augmentations: modes compared by eval
        r_grid: prunable rates swept by ablate-r
        cosine_instances / cosine_images: sizes of the cosine diagnostic
        decay_rate_grid / masks_per_point: accuracy-decay sweep
        gradcam_layers: architecture -> layer name for heatmaps
        gradcam_images: images rendered per augmentation
    """
    white_box: Tuple[str, ...] = ()
    augmentations: Tuple[str, ...] = ('none', 'dwp')
    r_grid: Tuple[float, ...] = ()
    cosine_instances: int = 5
    cosine_images: int = 10
    decay_rate_grid: Tuple[float, ...] = ()
    masks_per_point: int = 50
    gradcam_layers: Dict[str, str] = field(default_factory=dict)
    gradcam_images: int = 4


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    dataset: DatasetConfig
    zoo: ZooConfig
    attack: AttackConfig
    experiment: ExperimentConfig
    source: Dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self):
        """Fully resolved configuration, echoed into every run manifest."""
        return {
            'seed': self.seed,
            'output_dir': self.output_dir,
            'dataset': {
                'kind': self.dataset.kind, 'path': self.dataset.path, 'train_size': self.dataset.train_size,
                'eval_size': self.dataset.eval_size, 'num_classes': self.dataset.num_classes,
                'shape': list(self.dataset.shape), 'targets': self.dataset.targets,
            },
            'zoo': {
                'architectures': list(self.zoo.architectures),
                'train': {'epochs': self.zoo.train.epochs, 'batch_size': self.zoo.train.batch_size,
                          'learning_rate': self.zoo.train.learning_rate, 'momentum': self.zoo.train.momentum,
                          'seed': self.zoo.train.seed},
                'adversarial': list(self.zoo.adversarial),
                'pgd': {'steps': self.zoo.pgd.steps, 'epsilon_at': self.zoo.pgd.epsilon_at,
                        'step_size': self.zoo.pgd.step_size},
                'checkpoint_dir': self.zoo.checkpoint_dir,
            },
            'attack': self.attack.to_dict(),
            'experiment': {
                'white_box': list(self.experiment.white_box),
                'augmentations': list(self.experiment.augmentations),
                'r_grid': list(self.experiment.r_grid),
                'cosine_instances': self.experiment.cosine_instances,
                'cosine_images': self.experiment.cosine_images,
                'decay_rate_grid': list(self.experiment.decay_rate_grid),
                'masks_per_point': self.experiment.masks_per_point,
                'gradcam_layers': dict(self.experiment.gradcam_layers),
                'gradcam_images': self.experiment.gradcam_images,
            },
        }

    @property
    def checkpoint_dir(self):
        return self.zoo.checkpoint_dir or os.path.join(self.output_dir, 'checkpoints')


########### Field readers ###########

class _Section:
    """Reads typed values out of one JSON object, remembering what was consumed."""

    def __init__(self, data, path):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"expected an object, got {type(data).__name__}", path)
        self.data = data
        self.path = path
        self.seen = set()

    def _at(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, default):
        self.seen.add(key)
        return self.data.get(key, default)

    def section(self, key):
        return _Section(self.get(key, None), self._at(key))

    def integer(self, key, default):
        value = self.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", self._at(key))
        return value

    def number(self, key, default):
        value = self.get(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", self._at(key))
        return float(value)

    def string(self, key, default, choices=None):
        value = self.get(key, default)
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", self._at(key))
        if choices is not None and value not in choices:
            raise ConfigError(f"{value!r} is not one of {list(choices)}", self._at(key))
        return value

    def strings(self, key, default, choices=None):
        value = self.get(key, default)
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"expected a list of strings, got {value!r}", self._at(key))
        for v in value:
            if choices is not None and v not in choices:
                raise ConfigError(f"{v!r} is not one of {list(choices)}", self._at(key))
        return tuple(value)

    def numbers(self, key, default):
        value = self.get(key, default)
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"expected a list of numbers, got {value!r}", self._at(key))
        return tuple(float(v) for v in value)

    def finish(self):
        unknown = sorted(set(self.data) - self.seen)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]!r}", self._at(unknown[0]))


def _build(section, factory, **kwargs):
    """Construct a validated value, re-pointing its ConfigError at this section."""
    try:
        return factory(**kwargs)
    except ConfigError as exc:
        path = f"{section.path}.{exc.path}" if exc.path and section.path else (exc.path or section.path)
        message = str(exc).split(': ', 1)[-1] if exc.path else str(exc)
        raise ConfigError(message, path) from exc


def _dataset(section):
    shape = section.get('shape', [1, 16, 16])
    if (not isinstance(shape, list) or len(shape) != 3
            or any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in shape)):
        raise ConfigError(f"expected three positive integers, got {shape!r}", section._at('shape'))
    config = DatasetConfig(
        kind=section.string('kind', 'synthetic', DATASET_KINDS),
        path=section.string('path', ''),
        train_size=section.integer('train_size', 0),
        eval_size=section.integer('eval_size', 200),
        num_classes=section.integer('num_classes', 10),
        shape=tuple(shape),
        targets=section.string('targets', ''),
    )
    section.finish()
    if config.train_size < 0:
        raise ConfigError("must be non-negative", section._at('train_size'))
    if config.eval_size < 1:
        raise ConfigError("must be at least 1", section._at('eval_size'))
    if config.num_classes < 2:
        raise ConfigError("must be at least 2", section._at('num_classes'))
    return config


def _zoo(section, seed):
    architectures = section.strings('architectures', list(settings.ZOO_ARCHITECTURES), ROSTER_NAMES)
    if not architectures:
        raise ConfigError("the zoo needs at least one architecture", section._at('architectures'))

    train = section.section('train')
    defaults = settings.TRAIN_DEFAULTS
    train_spec = _build(train, TrainSpec,
                        epochs=train.integer('epochs', defaults['epochs']),
                        batch_size=train.integer('batch_size', defaults['batch_size']),
                        learning_rate=train.number('learning_rate', defaults['learning_rate']),
                        momentum=train.number('momentum', defaults['momentum']),
                        seed=train.integer('seed', seed))
    train.finish()

    pgd = section.section('pgd')
    defaults = settings.PGD_DEFAULTS
    pgd_spec = _build(pgd, PgdSpec,
                      steps=pgd.integer('steps', defaults['steps']),
                      epsilon_at=pgd.number('epsilon_at', defaults['epsilon_at']),
                      step_size=pgd.number('step_size', defaults['step_size']))
    pgd.finish()

    adversarial = section.strings('adversarial', [], ARCHITECTURES)
    checkpoint_dir = section.string('checkpoint_dir', '')
    section.finish()
    return ZooConfig(architectures, train_spec, adversarial, pgd_spec, checkpoint_dir)


def _kernel(section, default):
    config = _build(section, KernelSpec,
                    family=section.string('family', default.family),
                    length=section.integer('length', default.length),
                    sigma=section.number('sigma', default.sigma))
    section.finish()
    return config


def _erosion(section, mode):
    defaults = settings.EROSION_DEFAULTS[mode]
    config = _build(section, ErosionParams,
                    mode=section.string('mode', mode, ('gn', 'dsne')),
                    drop_rate=section.number('drop_rate', defaults['drop_rate']),
                    skip_range=section.number('skip_range', defaults['skip_range']),
                    scale_range=section.number('scale_range', defaults['scale_range']),
                    bias_gamma=section.number('bias_gamma', defaults['bias_gamma']))
    section.finish()
    return config


def _attack(section, seed):
    defaults = dict(settings.ATTACK_DEFAULTS)
    preset = section.get('preset', None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"{preset!r} is not one of {list(PRESETS)}", section._at('preset'))
        shaped = AttackConfig.preset(preset)
        defaults.update(scale_copies=shaped.scale_copies, p_di=shaped.p_di, kernel=shaped.kernel.to_dict())
    kernel_default = KernelSpec(**defaults['kernel'])

    augmentation = section.string('augmentation', defaults['augmentation'], AUGMENTATIONS)
    erosion = None
    if 'erosion' in section.data or augmentation in ('gn', 'dsne'):
        mode = augmentation if augmentation in ('gn', 'dsne') else 'gn'
        erosion = _erosion(section.section('erosion'), mode)

    betas = section.get('betas', None)
    if betas is not None:
        betas = section.numbers('betas', betas)

    config = _build(section, AttackConfig,
                    epsilon=section.number('epsilon', defaults['epsilon']),
                    alpha=section.number('alpha', defaults['alpha']),
                    iters=section.integer('iters', defaults['iters']),
                    mu=section.number('mu', defaults['mu']),
                    scale_copies=section.integer('scale_copies', defaults['scale_copies']),
                    p_di=section.number('p_di', defaults['p_di']),
                    di_range=section.number('di_range', defaults['di_range']),
                    kernel=_kernel(section.section('kernel'), kernel_default),
                    augmentation=augmentation,
                    r=section.number('r', defaults['r']),
                    p_bern=section.number('p_bern', defaults['p_bern']),
                    erosion=erosion,
                    betas=betas,
                    loss=section.string('loss', defaults['loss']),
                    seed=section.integer('seed', seed))
    section.finish()
    return config


def _experiment(section, zoo):
    white_box = section.strings('white_box', [], zoo.architectures)
    layers = section.get('gradcam_layers', {})
    if not isinstance(layers, dict) or not all(isinstance(v, str) for v in layers.values()):
        raise ConfigError("expected an object of layer names", section._at('gradcam_layers'))
    config = ExperimentConfig(
        white_box=white_box,
        augmentations=section.strings('augmentations', ['none', 'dwp'], AUGMENTATIONS),
        r_grid=section.numbers('r_grid', list(settings.ABLATION_R_GRID)),
        cosine_instances=section.integer('cosine_instances', settings.COSINE_INSTANCES),
        cosine_images=section.integer('cosine_images', settings.COSINE_IMAGES),
        decay_rate_grid=section.numbers('decay_rate_grid', list(settings.DECAY_RATE_GRID)),
        masks_per_point=section.integer('masks_per_point', settings.DECAY_MASKS_PER_POINT),
        gradcam_layers=dict(layers),
        gradcam_images=section.integer('gradcam_images', 4),
    )
    section.finish()
    for r in config.r_grid:
        if not 0 <= r <= 1:
            raise ConfigError(f"prunable rate {r} outside [0, 1]", section._at('r_grid'))
    for q in config.decay_rate_grid:
        if not 0 <= q <= 1:
            raise ConfigError(f"pruned fraction {q} outside [0, 1]", section._at('decay_rate_grid'))
    for key in ('cosine_instances', 'cosine_images', 'masks_per_point', 'gradcam_images'):
        if getattr(config, key) < 1:
            raise ConfigError("must be at least 1", section._at(key))
    unknown = sorted(set(config.gradcam_layers) - set(ROSTER_NAMES))
    if unknown:
        raise ConfigError(f"unknown architecture {unknown[0]!r}", section._at('gradcam_layers'))
    return config


def config_from_dict(data) -> RunConfig:
    root = _Section(data, '')
    if 'seed' not in root.data:
        raise ConfigError("a run needs an explicit seed", 'seed')
    seed = root.integer('seed', 0)
    if seed < 0:
        raise ConfigError("must be non-negative", 'seed')
    output_dir = os.environ.get('DWP_OUTPUT_DIR') or root.string('output_dir', settings.OUTPUT_DIR)
    dataset = _dataset(root.section('dataset'))
    zoo = _zoo(root.section('zoo'), seed)
    attack = _attack(root.section('attack'), seed)
    experiment = _experiment(root.section('experiment'), zoo)
    root.finish()
    return RunConfig(seed, output_dir, dataset, zoo, attack, experiment, source=data)


def _set_path(tree, path, value):
    keys = path.split('.')
    node = tree
    for depth, key in enumerate(keys[:-1]):
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError("cannot descend into a non-object", '.'.join(keys[:depth + 1]))
        node = child
    node[keys[-1]] = value


def parse_override(text):
    """'attack.epsilon=0.1' -> ('attack.epsilon', 0.1); non-JSON values stay strings."""
    path, sep, raw = text.partition('=')
    if not sep or not path:
        raise ConfigError(f"override {text!r} is not of the form path=value")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return path.strip(), value


def parse_config(data: bytes, overrides=()) -> RunConfig:
    """
    Parse and validate a UTF-8 JSON run configuration.

    Args:
        data: the document
        overrides: 'path=value' strings applied before validation

    Raises:
        ConfigError: not JSON, unknown key, type mismatch or bad value.
    """
    try:
        tree = json.loads(data.decode('utf-8')) if data.strip() else {}
    except (UnicodeDecodeError, ValueError) as exc:
        raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError("configuration must be a JSON object")
    for text in overrides:
        path, value = parse_override(text)
        _set_path(tree, path, value)
    return config_from_dict(tree)


def load_config(path, overrides=()) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"configuration file {path} does not exist")
    with open(path, 'rb') as f:
        config = parse_config(f.read(), overrides)
    logger.info("Loaded configuration %s (seed %d)", path, config.seed)
    return config
