"""
Training for the victim zoo: natural SGD, multi-step PGD adversarial
training, and accuracy evaluation.

None of this comes from pretrained checkpoints; every choice here is a
desk-scale stand-in for the public networks of the reference setup.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm

from .attack import clip_to_budget
from .exceptions import ConfigError, RejectedInputError, TrainingError
from .losses import cross_entropy_upstream
from .models import backward_input, evaluate, predict
from .rng import rng_for
from .tensor import Tensor, cross_entropy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSpec:
    """Plain SGD with momentum over softmax cross-entropy."""
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}", 'epochs')
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}", 'batch_size')
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}", 'learning_rate')
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}", 'momentum')


@dataclass(frozen=True)
class PgdSpec:
    """
    Untargeted L-inf PGD used for adversarial training and robust accuracy.

    step_size may exceed epsilon_at only when the budget is zero, so the
    zero-budget run stays expressible.
    """
    steps: int = 3
    epsilon_at: float = 8 / 255
    step_size: float = 2.5 * (8 / 255) / 3

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}", 'steps')
        if self.epsilon_at < 0:
            raise ConfigError(f"epsilon_at must be non-negative, got {self.epsilon_at}", 'epsilon_at')
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}", 'step_size')
        if self.epsilon_at > 0 and self.step_size > self.epsilon_at:
            raise ConfigError("step_size must not exceed epsilon_at", 'step_size')


def pgd_perturb(model, images, labels, pgd: PgdSpec):
    """
    Untargeted PGD: sign-gradient ascent on cross-entropy, each step clipped
    to the epsilon_at ball around `images` and to [0, 1].
    """
    images = np.asarray(images)
    step = images.dtype.type(pgd.step_size)
    x = images
    for _ in range(pgd.steps):
        logits, _ = evaluate(model, Tensor(x))
        upstream = cross_entropy_upstream(logits.data, labels)
        grad = backward_input(model, x, upstream).data
        x = clip_to_budget(x + step * np.sign(grad), images, pgd.epsilon_at)
    return x


def _fit(model, dataset, spec: TrainSpec, pgd=None, progress=False):
    if len(dataset) == 0:
        raise RejectedInputError("Cannot train on an empty dataset")
    if dataset.labels.max() >= model.num_classes:
        raise RejectedInputError(f"Dataset labels exceed num_classes={model.num_classes}")

    dtype = model.dtype
    values = {name: p.value.copy() for name, p in model.params.items()}
    velocity = {name: np.zeros_like(v) for name, v in values.items()}
    lr = dtype.type(spec.learning_rate)
    momentum = dtype.type(spec.momentum)
    images = dataset.images.astype(dtype, copy=False)
    labels = dataset.labels
    order_rng = rng_for(spec.seed, 'shuffle')

    for epoch in range(spec.epochs):
        order = order_rng.permutation(len(dataset))
        batches = range(0, len(order), spec.batch_size)
        total = 0.0
        for start in tqdm(batches, desc=f"{model.arch_name} epoch {epoch}", disable=not progress, leave=False):
            idx = order[start:start + spec.batch_size]
            xb, yb = images[idx], labels[idx]
            if pgd is not None:
                xb = pgd_perturb(model.with_weights(values), xb, yb, pgd)
            logits, tensors = evaluate(model, Tensor(xb), weight_grads=True, weights=values)
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise TrainingError("loss is not finite", epoch)
            loss.backward()
            for name, t in tensors.items():
                velocity[name] = momentum * velocity[name] + t.grad
                values[name] = values[name] - lr * velocity[name]
            total += float(loss.data) * len(idx)
        logger.info("%s epoch %d: mean loss %.4f", model.arch_name, epoch, total / len(dataset))

    trained = model.with_weights(values)
    accuracy = evaluate_accuracy(trained, dataset)
    metadata = dict(model.metadata)
    metadata.update({
        'train_accuracy': accuracy,
        'train_spec': asdict(spec),
        'adversarial': asdict(pgd) if pgd is not None else None,
    })
    return trained.with_weights({}, metadata=metadata)


def train_model(model, dataset, spec: TrainSpec, progress=False):
    """
    Train naturally; deterministic given spec.seed.

    Returns:
        A new Model; metadata carries the final train accuracy.

    Raises:
        TrainingError: the loss became NaN or infinite.
    """
    return _fit(model, dataset, spec, progress=progress)


def adversarial_train(model, dataset, spec: TrainSpec, pgd: PgdSpec, progress=False):
    """Train on untargeted PGD examples regenerated for every minibatch."""
    return _fit(model, dataset, spec, pgd=pgd, progress=progress)


def evaluate_accuracy(model, dataset, batch_size=256):
    """
    Fraction of samples whose argmax logit equals the label.

    Raises:
        RejectedInputError: the dataset is empty.
    """
    if len(dataset) == 0:
        raise RejectedInputError("Cannot evaluate accuracy on an empty dataset")
    predictions = predict(model, dataset.images.astype(model.dtype, copy=False), batch_size=batch_size,
                          sample_ids=dataset.ids)
    return float(np.mean(predictions == dataset.labels))


def robust_accuracy(model, dataset, pgd: PgdSpec, batch_size=256):
    """Accuracy on untargeted PGD examples built against the model itself."""
    if len(dataset) == 0:
        raise RejectedInputError("Cannot evaluate accuracy on an empty dataset")
    images = dataset.images.astype(model.dtype, copy=False)
    correct = 0
    for start in range(0, len(dataset), batch_size):
        xb = images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        adv = pgd_perturb(model, xb, yb, pgd)
        correct += int(np.sum(predict(model, adv) == yb))
    return correct / len(dataset)
