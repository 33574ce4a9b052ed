"""
The victim zoo: four small heterogeneous classifiers.

    small_conv    plain two-conv network
    small_vgg     deeper, narrower stack of 3x3 convolutions
    small_res     residual network with two identity-skip blocks
    small_incept  parallel-branch (inception-style) blocks wrapped in identity skips

A roster entry may also name the adversarially trained twin of any of
these, e.g. small_res_adv, written by the advtrain command.

Parameter count of small_conv on (1, 28, 28) with 10 classes:
    conv1  8*1*3*3 + 8   =   80
    conv2  16*8*3*3 + 16 = 1168
    fc     (16*7*7)*10 + 10 = 7850
    total                = 9098
"""

import logging

import numpy as np

from .exceptions import ConfigError
from .layers import (
    AvgPool, Conv2d, Dense, Flatten, GlobalAvgPool, MaxPool, Parallel, ReLU, Residual,
)
from .models import Model, Parameter

logger = logging.getLogger(__name__)


def _small_conv(c, h, w, classes):
    return (
        Conv2d('conv1', in_channels=c, out_channels=8),
        ReLU('relu1'),
        MaxPool('pool1'),
        Conv2d('conv2', in_channels=8, out_channels=16),
        ReLU('relu2'),
        MaxPool('pool2'),
        Flatten('flatten'),
        Dense('fc', in_features=16 * (h // 4) * (w // 4), out_features=classes),
    )


def _small_vgg(c, h, w, classes):
    return (
        Conv2d('conv1', in_channels=c, out_channels=8),
        ReLU('relu1'),
        Conv2d('conv2', in_channels=8, out_channels=8),
        ReLU('relu2'),
        MaxPool('pool1'),
        Conv2d('conv3', in_channels=8, out_channels=16),
        ReLU('relu3'),
        Conv2d('conv4', in_channels=16, out_channels=16),
        ReLU('relu4'),
        AvgPool('pool2'),
        Flatten('flatten'),
        Dense('fc1', in_features=16 * (h // 4) * (w // 4), out_features=64),
        ReLU('relu5'),
        Dense('fc2', in_features=64, out_features=classes),
    )


def _res_block(name, channels):
    return Residual(name, branch=(
        Conv2d(f'{name}.conv_a', in_channels=channels, out_channels=channels),
        ReLU(f'{name}.relu_a'),
        Conv2d(f'{name}.conv_b', in_channels=channels, out_channels=channels),
    ))


def _small_res(c, h, w, classes):
    return (
        Conv2d('stem', in_channels=c, out_channels=8),
        ReLU('relu0'),
        _res_block('block1', 8),
        ReLU('relu1'),
        _res_block('block2', 8),
        ReLU('relu2'),
        MaxPool('pool1'),
        Conv2d('conv3', in_channels=8, out_channels=16, stride=2),
        ReLU('relu3'),
        GlobalAvgPool('gap'),
        Dense('fc', in_features=16, out_features=classes),
    )


def _mixed_block(name, channels):
    half = channels // 2
    mixed = Parallel(f'{name}.mix', branches=(
        (Conv2d(f'{name}.b1x1', in_channels=channels, out_channels=half, kernel_size=1),
         ReLU(f'{name}.b1x1_relu')),
        (Conv2d(f'{name}.b3x3', in_channels=channels, out_channels=half, kernel_size=3),
         ReLU(f'{name}.b3x3_relu')),
        (Conv2d(f'{name}.b5x5_a', in_channels=channels, out_channels=half, kernel_size=1),
         ReLU(f'{name}.b5x5_relu_a'),
         Conv2d(f'{name}.b5x5_b', in_channels=half, out_channels=half, kernel_size=5),
         ReLU(f'{name}.b5x5_relu_b')),
    ))
    return Residual(name, branch=(
        mixed,
        Conv2d(f'{name}.project', in_channels=3 * half, out_channels=channels, kernel_size=1),
    ))


def _small_incept(c, h, w, classes):
    return (
        Conv2d('stem', in_channels=c, out_channels=8),
        ReLU('relu0'),
        _mixed_block('mixed1', 8),
        ReLU('relu1'),
        MaxPool('pool1'),
        _mixed_block('mixed2', 8),
        ReLU('relu2'),
        Conv2d('conv3', in_channels=8, out_channels=16, stride=2),
        ReLU('relu3'),
        GlobalAvgPool('gap'),
        Dense('fc', in_features=16, out_features=classes),
    )


ARCHITECTURES = {
    'small_conv': _small_conv,
    'small_vgg': _small_vgg,
    'small_res': _small_res,
    'small_incept': _small_incept,
}

# Feature map each network's heatmaps are taken from
GRADCAM_LAYERS = {
    'small_conv': 'relu2',
    'small_vgg': 'relu4',
    'small_res': 'relu2',
    'small_incept': 'relu2',
}

# Adversarially trained twins are stored and rostered as <arch>_adv
ROBUST_SUFFIX = '_adv'

ROSTER_NAMES = tuple(ARCHITECTURES) + tuple(name + ROBUST_SUFFIX for name in ARCHITECTURES)


def base_architecture(name):
    """Architecture behind a roster entry: 'small_res_adv' -> 'small_res'."""
    if name.endswith(ROBUST_SUFFIX) and name[:-len(ROBUST_SUFFIX)] in ARCHITECTURES:
        return name[:-len(ROBUST_SUFFIX)]
    return name


def is_robust_twin(name):
    return base_architecture(name) != name


def _param_specs(layers):
    return [spec for layer in layers for spec in layer.param_specs()]


def build_architecture(name, input_spec, num_classes, seed=0, dtype=np.float32) -> Model:
    """
    Build a freshly initialized model: He-uniform kernels, zero biases.

    Raises:
        ConfigError: unknown architecture name or unusable input shape.
    """
    if name not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {name!r}; expected one of {sorted(ARCHITECTURES)}", 'arch')
    c, h, w = (int(v) for v in input_spec)
    if min(c, h, w) < 1 or h < 8 or w < 8:
        raise ConfigError(f"input spec {tuple(input_spec)} is too small", 'input_spec')
    if num_classes < 2:
        raise ConfigError(f"num_classes must be at least 2, got {num_classes}", 'num_classes')

    layers = ARCHITECTURES[name](c, h, w, num_classes)
    shape = (c, h, w)
    for layer in layers:
        shape = layer.output_shape(shape)
    if shape != (num_classes,):
        raise ConfigError(f"{name} produces output shape {shape} for input {input_spec}", 'input_spec')

    rng = np.random.default_rng(seed)
    params = {}
    for spec in _param_specs(layers):
        if spec.name in params:
            raise ConfigError(f"duplicate parameter {spec.name} in {name}", 'arch')
        if spec.role == 'kernel':
            bound = np.sqrt(6.0 / spec.fan_in)
            value = rng.uniform(-bound, bound, size=spec.shape)
        else:
            value = np.zeros(spec.shape)
        params[spec.name] = Parameter(spec.name, spec.role, spec.role == 'kernel', value.astype(dtype))

    model = Model(arch_name=name, layers=layers, params=params, input_spec=(c, h, w),
                  num_classes=int(num_classes), metadata={'init_seed': int(seed)})
    logger.debug("Built %s with %d parameters", name, model.parameter_count())
    return model
