"""
Models, model views and the differentiation entry points.

A `Model` is an ordered tuple of layer descriptors plus named parameter
arrays. A `ModelView` is a base model seen through replaced weights and/or
augmentation hooks; views are what the attack evaluates at every iteration
and never copy the parameters they leave alone.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Tuple

import numpy as np

from .exceptions import RejectedInputError
from .layers import IDENTITY_HOOKS, Hooks, Pass, Residual, run_layers, walk
from .losses import LossSpec
from .tensor import Tensor

logger = logging.getLogger(__name__)

ROLES = ('kernel', 'bias')


@dataclass(frozen=True)
class Parameter:
    """
    A named parameter array.

    Attributes:
        name: dotted name, '<layer>.weight' or '<layer>.bias'
        role: 'kernel' or 'bias'
        prunable: True exactly for kernels
        value: read-only ndarray
    """
    name: str
    role: str
    prunable: bool
    value: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise RejectedInputError(f"Parameter {self.name} has unknown role {self.role!r}")
        if self.prunable != (self.role == 'kernel'):
            raise RejectedInputError(f"Parameter {self.name}: prunable must be set exactly for kernels")
        if self.value.flags.writeable:
            frozen = np.array(self.value, copy=True)
            frozen.setflags(write=False)
            object.__setattr__(self, 'value', frozen)

    def with_value(self, value):
        return replace(self, value=np.asarray(value, dtype=self.value.dtype))


@dataclass(frozen=True)
class Model:
    """
    Classifier over (C, H, W) inputs.

    Attributes:
        arch_name: architecture identifier, see `architectures.ARCHITECTURES`
        layers: ordered layer descriptors
        params: parameters in layer order, keyed by name
        input_spec: (C, H, W)
        num_classes: number of logits
        metadata: JSON-serializable facts recorded by training (accuracy, specs)
    """
    arch_name: str
    layers: Tuple
    params: Mapping[str, Parameter]
    input_spec: Tuple[int, int, int]
    num_classes: int
    metadata: Mapping = field(default_factory=dict)

    hooks = IDENTITY_HOOKS

    @property
    def base(self):
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def weights(self) -> Dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params.items()}

    def parameter_count(self):
        return sum(p.value.size for p in self.params.values())

    def with_weights(self, values: Mapping[str, np.ndarray], metadata=None):
        """Return a new model with some parameter arrays replaced."""
        params = {
            name: (p.with_value(values[name]) if name in values else p)
            for name, p in self.params.items()
        }
        return replace(self, params=params, metadata=dict(self.metadata if metadata is None else metadata))

    def astype(self, dtype):
        return self.with_weights({n: p.value.astype(dtype) for n, p in self.params.items()})

    def layer_names(self):
        return [layer.name for layer in walk(self.layers)]

    def skip_block_names(self):
        return [layer.name for layer in walk(self.layers) if isinstance(layer, Residual)]


@dataclass(frozen=True)
class ModelView:
    """
    A base model evaluated with replaced weights and/or augmentation hooks.

    Attributes:
        base: the untouched model
        overrides: replacement arrays keyed by parameter name
        hooks: activation/skip hooks in effect
    """
    base: Model
    overrides: Mapping[str, np.ndarray] = field(default_factory=dict)
    hooks: Hooks = IDENTITY_HOOKS

    @property
    def arch_name(self):
        return self.base.arch_name

    @property
    def layers(self):
        return self.base.layers

    @property
    def input_spec(self):
        return self.base.input_spec

    @property
    def num_classes(self):
        return self.base.num_classes

    @property
    def dtype(self):
        return self.base.dtype

    @property
    def metadata(self):
        return self.base.metadata

    @property
    def params(self):
        return {
            name: (p.with_value(self.overrides[name]) if name in self.overrides else p)
            for name, p in self.base.params.items()
        }

    def weights(self):
        values = self.base.weights()
        values.update(self.overrides)
        return values

    def layer_names(self):
        return self.base.layer_names()

    def skip_block_names(self):
        return self.base.skip_block_names()


def _check_input(model, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_spec):
        raise RejectedInputError(
            f"Input shape {tuple(x.shape)} does not match model input (batch, {', '.join(map(str, model.input_spec))})"
        )


def evaluate(model, x: Tensor, sample_ids=None, weight_grads=False, recorded=None, weights=None):
    """
    Run the layer graph on a Tensor and return the logits Tensor.

    Lower-level than `forward`: the caller controls whether `x` and the
    weights are on the gradient tape, which training and GradCAM need.
    """
    _check_input(model, x)
    values = model.weights() if weights is None else weights
    dtype = x.dtype
    tensors = {name: Tensor(np.asarray(v, dtype=dtype), requires_grad=weight_grads) for name, v in values.items()}
    if sample_ids is None:
        sample_ids = np.arange(x.shape[0])
    run = Pass(weights=tensors, hooks=model.hooks, sample_ids=np.asarray(sample_ids), recorded=recorded)
    return run_layers(model.layers, x, run), tensors


def forward(model, x, sample_ids=None) -> Tensor:
    """
    Pre-softmax logits of `model` on a (batch, C, H, W) input.

    Raises:
        RejectedInputError: the input shape does not match the model.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    logits, _ = evaluate(model, Tensor(data), sample_ids=sample_ids)
    return logits.detach()


def backward_input(model, x, upstream, sample_ids=None) -> Tensor:
    """
    Gradient of <logits, upstream> with respect to the input.

    Raises:
        RejectedInputError: shapes disagree or `upstream` is not finite.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    upstream = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream)
    if not np.all(np.isfinite(upstream)):
        raise RejectedInputError("Upstream gradient contains non-finite values")
    leaf = Tensor(data, requires_grad=True)
    logits, _ = evaluate(model, leaf, sample_ids=sample_ids)
    if upstream.shape != logits.shape:
        raise RejectedInputError(f"Upstream shape {upstream.shape} does not match logits shape {logits.shape}")
    logits.backward(upstream)
    return Tensor(leaf.grad)


def grad_check(model, x, loss: LossSpec, fd_step=1e-5, coordinates=64, seed=0) -> float:
    """
    Largest relative error between the analytic input gradient and central
    finite differences over a sample of input coordinates.

    The relative error of coordinate i is |a_i - n_i| / max(|a_i|, |n_i|, floor)
    with floor = 1e-3 * max|a| + 1e-12, so coordinates whose true gradient is
    zero do not divide by rounding noise.
    """
    if not 0 < fd_step <= 1e-2:
        raise RejectedInputError(f"fd_step must lie in (0, 1e-2], got {fd_step}")
    data = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    model = model.astype(np.float64) if isinstance(model, Model) else model

    logits = forward(model, data).data
    analytic = backward_input(model, data, loss.upstream(logits)).data

    flat = data.reshape(-1)
    rng = np.random.default_rng(seed)
    count = min(coordinates, flat.size)
    picks = rng.choice(flat.size, size=count, replace=False) if count < flat.size else np.arange(flat.size)

    numeric = np.empty(count)
    for k, index in enumerate(picks):
        plus, minus = flat.copy(), flat.copy()
        plus[index] += fd_step
        minus[index] -= fd_step
        f_plus = loss.value(forward(model, plus.reshape(data.shape)).data)
        f_minus = loss.value(forward(model, minus.reshape(data.shape)).data)
        numeric[k] = (f_plus - f_minus) / (2 * fd_step)

    chosen = analytic.reshape(-1)[picks]
    floor = 1e-3 * np.max(np.abs(analytic)) + 1e-12
    denom = np.maximum(np.maximum(np.abs(chosen), np.abs(numeric)), floor)
    error = float(np.max(np.abs(chosen - numeric) / denom))
    logger.debug("grad_check %s: max relative error %.3e over %d coordinates", model.arch_name, error, count)
    return error


def predict(model, images, batch_size=256, sample_ids=None):
    """Argmax class per sample; ties resolve to the lowest index."""
    images = np.asarray(images)
    predictions = []
    for start in range(0, len(images), batch_size):
        ids = None if sample_ids is None else sample_ids[start:start + batch_size]
        logits = forward(model, images[start:start + batch_size], sample_ids=ids).data
        predictions.append(np.argmax(logits, axis=1))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)
