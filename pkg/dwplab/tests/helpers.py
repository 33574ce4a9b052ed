"""Small models and datasets shared by the test modules."""

import functools

import numpy as np

from dwplab.architectures import build_architecture
from dwplab.data import make_synthetic
from dwplab.layers import Dense, Flatten, GlobalAvgPool, ReLU
from dwplab.layers import Conv2d as ConvLayer
from dwplab.models import Model, Parameter
from dwplab.training import TrainSpec, train_model

SHAPE = (1, 16, 16)


def make_model(arch_name, layers, values, input_spec, num_classes, dtype=np.float64):
    """Assemble a Model from layer descriptors and a name -> array mapping."""
    params = {}
    for name, value in values.items():
        role = 'kernel' if name.endswith('.weight') else 'bias'
        params[name] = Parameter(name, role, role == 'kernel', np.asarray(value, dtype=dtype))
    return Model(arch_name, tuple(layers), params, tuple(input_spec), num_classes)


def linear_model(input_spec=(1, 4, 4), num_classes=3, seed=0, dtype=np.float64):
    """Flatten + one dense layer: logits are an affine map of the pixels."""
    features = int(np.prod(input_spec))
    rng = np.random.default_rng(seed)
    values = {
        'fc.weight': rng.normal(size=(num_classes, features)),
        'fc.bias': rng.normal(size=num_classes) * 0.1,
    }
    layers = (Flatten('flatten'), Dense('fc', in_features=features, out_features=num_classes))
    return make_model('linear', layers, values, input_spec, num_classes, dtype)


def channel_mean_model(channels=3, size=6, picked=1, num_classes=2, seed=0):
    """
    1x1 conv with non-negative weights, ReLU named 'act', global average
    pool and a dense layer reading one channel: class 0's logit is the
    spatial mean of channel `picked` of 'act'.
    """
    rng = np.random.default_rng(seed)
    fc = np.zeros((num_classes, channels))
    fc[0, picked] = 1.0
    values = {
        'mix.weight': rng.uniform(-1.0, 1.0, size=(channels, 1, 1, 1)),
        'mix.bias': rng.uniform(-0.2, 0.2, size=channels),
        'fc.weight': fc,
        'fc.bias': np.zeros(num_classes),
    }
    layers = (
        ConvLayer('mix', in_channels=1, out_channels=channels, kernel_size=1),
        ReLU('act'),
        GlobalAvgPool('gap'),
        Dense('fc', in_features=channels, out_features=num_classes),
    )
    return make_model('channel_mean', layers, values, (1, size, size), num_classes)


@functools.lru_cache(maxsize=None)
def synthetic(n=400, seed=0, num_classes=10):
    return make_synthetic(n, num_classes=num_classes, shape=SHAPE, seed=seed)


@functools.lru_cache(maxsize=None)
def trained(arch_name='small_conv', seed=0, epochs=4):
    """A model trained on the synthetic set; cached across tests."""
    model = build_architecture(arch_name, SHAPE, 10, seed=seed)
    spec = TrainSpec(epochs=epochs, batch_size=32, learning_rate=0.02, momentum=0.9, seed=seed)
    return train_model(model, synthetic(600, seed=seed), spec)
