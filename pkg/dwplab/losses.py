"""
Objectives on logits, evaluated in numpy.

The attack minimizes the logit loss J = -z_target; training and PGD use
softmax cross-entropy. Each objective exposes its value and its gradient
with respect to the logits, which is the upstream fed to `backward_input`.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import RejectedInputError


def _check_targets(logits, targets):
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise RejectedInputError(f"Expected {logits.shape[0]} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise RejectedInputError(f"Target class out of range [0, {logits.shape[1]})")
    return targets


def logit_loss(logits, targets):
    """Per-sample J = -z_target."""
    logits = np.asarray(logits)
    targets = _check_targets(logits, targets)
    return -logits[np.arange(len(targets)), targets]


def logit_loss_upstream(logits, targets):
    """dJ/dz: -1 at the target class, 0 elsewhere."""
    logits = np.asarray(logits)
    targets = _check_targets(logits, targets)
    upstream = np.zeros_like(logits)
    upstream[np.arange(len(targets)), targets] = -1
    return upstream


def softmax_cross_entropy(logits, labels):
    """Per-sample cross-entropy of softmax(logits) against labels."""
    logits = np.asarray(logits)
    labels = _check_targets(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(len(labels)), labels]


def cross_entropy_upstream(logits, labels):
    """d/dz of the summed cross-entropy: softmax(z) - onehot(label)."""
    logits = np.asarray(logits)
    labels = _check_targets(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(len(labels)), labels] -= 1
    return probs


@dataclass(frozen=True)
class LossSpec:
    """
    Scalar objective summed over the batch, used by gradient checks.

    Attributes:
        kind: 'logit', 'cross_entropy' or 'linear'
        targets: class per sample (logit, cross_entropy)
        weights: fixed upstream array (linear: the objective is <logits, weights>)
    """
    kind: str
    targets: tuple = ()
    weights: object = None

    def value(self, logits):
        if self.kind == 'logit':
            return float(logit_loss(logits, self.targets).sum())
        if self.kind == 'cross_entropy':
            return float(softmax_cross_entropy(logits, self.targets).sum())
        if self.kind == 'linear':
            return float(np.sum(logits * self.weights))
        raise RejectedInputError(f"Unknown loss kind {self.kind!r}")

    def upstream(self, logits):
        if self.kind == 'logit':
            return logit_loss_upstream(logits, self.targets)
        if self.kind == 'cross_entropy':
            return cross_entropy_upstream(logits, self.targets)
        if self.kind == 'linear':
            return np.asarray(self.weights, dtype=np.asarray(logits).dtype)
        raise RejectedInputError(f"Unknown loss kind {self.kind!r}")
