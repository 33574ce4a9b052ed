"""
Layer descriptors.

A layer is an immutable description (name, shapes) plus an `apply` that
evaluates it over a `Pass`: the weights in effect, the augmentation hooks
and an optional recorder for intermediate activations. Layers never own
arrays, which is what lets a view swap weights without copying a model.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ParamSpec:
    name: str
    role: str  # 'kernel' or 'bias'
    shape: Tuple[int, ...]
    fan_in: int


class Hooks:
    """
    Identity augmentation hooks.

    `activation` sees every ReLU output; `skip_factors` returns the
    (identity-skip, residual-branch) multipliers of a residual block.
    """

    def activation(self, name, x, run):
        return x

    def skip_factors(self, name):
        return 1.0, 1.0


IDENTITY_HOOKS = Hooks()


@dataclass
class Pass:
    """State of one forward evaluation."""
    weights: Dict[str, Tensor]
    hooks: Hooks = IDENTITY_HOOKS
    sample_ids: Optional[np.ndarray] = None
    recorded: Optional[Dict[str, Tensor]] = None

    def record(self, name, x):
        if self.recorded is not None:
            self.recorded[name] = x


@dataclass(frozen=True)
class Layer:
    name: str

    def param_specs(self) -> List[ParamSpec]:
        return []

    def output_shape(self, shape):
        return shape

    def apply(self, x: Tensor, run: Pass) -> Tensor:
        raise NotImplementedError

    def sublayers(self) -> Sequence["Layer"]:
        return ()


def run_layers(layers, x, run):
    for layer in layers:
        x = layer.apply(x, run)
        run.record(layer.name, x)
    return x


@dataclass(frozen=True)
class Conv2d(Layer):
    in_channels: int = 1
    out_channels: int = 1
    kernel_size: int = 3
    stride: int = 1
    padding: int = -1  # -1 means kernel_size // 2

    @property
    def pad(self):
        return self.kernel_size // 2 if self.padding < 0 else self.padding

    def param_specs(self):
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        return [
            ParamSpec(f"{self.name}.weight", 'kernel', (self.out_channels, self.in_channels, k, k), fan_in),
            ParamSpec(f"{self.name}.bias", 'bias', (self.out_channels,), fan_in),
        ]

    def output_shape(self, shape):
        _, h, w = shape
        k, s, p = self.kernel_size, self.stride, self.pad
        return self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def apply(self, x, run):
        return T.conv2d(x, run.weights[f"{self.name}.weight"], run.weights[f"{self.name}.bias"],
                        stride=self.stride, padding=self.pad)


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int = 1
    out_features: int = 1

    def param_specs(self):
        return [
            ParamSpec(f"{self.name}.weight", 'kernel', (self.out_features, self.in_features), self.in_features),
            ParamSpec(f"{self.name}.bias", 'bias', (self.out_features,), self.in_features),
        ]

    def output_shape(self, shape):
        return (self.out_features,)

    def apply(self, x, run):
        return T.linear(x, run.weights[f"{self.name}.weight"], run.weights[f"{self.name}.bias"])


@dataclass(frozen=True)
class ReLU(Layer):
    """Rectifier; its output is the activation site augmentation hooks see."""

    def apply(self, x, run):
        return run.hooks.activation(self.name, x.relu(), run)


@dataclass(frozen=True)
class MaxPool(Layer):
    def output_shape(self, shape):
        c, h, w = shape
        return c, h // 2, w // 2

    def apply(self, x, run):
        return T.MaxPool2x2.apply(x)


@dataclass(frozen=True)
class AvgPool(Layer):
    def output_shape(self, shape):
        c, h, w = shape
        return c, h // 2, w // 2

    def apply(self, x, run):
        return T.AvgPool2x2.apply(x)


@dataclass(frozen=True)
class GlobalAvgPool(Layer):
    def output_shape(self, shape):
        return (shape[0],)

    def apply(self, x, run):
        return T.GlobalAvgPool.apply(x)


@dataclass(frozen=True)
class Flatten(Layer):
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def apply(self, x, run):
        return x.reshape(x.shape[0], -1)


@dataclass(frozen=True)
class Residual(Layer):
    """
    Identity-skip block: skip * x + branch_factor * F(x).

    The two factors come from the hooks; both are 1 on an unaugmented model.
    """
    branch: Tuple[Layer, ...] = field(default_factory=tuple)

    def sublayers(self):
        return self.branch

    def param_specs(self):
        return [spec for layer in self.branch for spec in layer.param_specs()]

    def output_shape(self, shape):
        out = shape
        for layer in self.branch:
            out = layer.output_shape(out)
        if out != shape:
            raise ValueError(f"Residual block {self.name} changes shape {shape} -> {out}")
        return shape

    def apply(self, x, run):
        fx = run_layers(self.branch, x, run)
        skip, gain = run.hooks.skip_factors(self.name)
        if skip != 1.0:
            x = x * skip
        if gain != 1.0:
            fx = fx * gain
        return x + fx


@dataclass(frozen=True)
class Parallel(Layer):
    """Inception-style block: branches evaluated side by side, concatenated on channels."""
    branches: Tuple[Tuple[Layer, ...], ...] = field(default_factory=tuple)

    def sublayers(self):
        return [layer for branch in self.branches for layer in branch]

    def param_specs(self):
        return [spec for layer in self.sublayers() for spec in layer.param_specs()]

    def output_shape(self, shape):
        channels = 0
        spatial = None
        for branch in self.branches:
            out = shape
            for layer in branch:
                out = layer.output_shape(out)
            channels += out[0]
            if spatial is not None and out[1:] != spatial:
                raise ValueError(f"Parallel block {self.name} has mismatched branch sizes")
            spatial = out[1:]
        return (channels,) + tuple(spatial)

    def apply(self, x, run):
        return T.concat([run_layers(branch, x, run) for branch in self.branches], axis=1)


def walk(layers):
    """Yield every layer, depth first, including those nested in blocks."""
    for layer in layers:
        yield layer
        yield from walk(layer.sublayers())
