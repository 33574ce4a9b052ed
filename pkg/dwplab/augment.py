"""
Model augmentation views.

Diversified weight pruning (DWP) marks the lowest-magnitude fraction r of
all kernel weights as prunable once per model, then at every attack
iteration zeroes each prunable weight independently with probability
p_bern. Weights outside the prunable set are never touched.

Ghost Networks (GN) and Dual-Stage Network Erosion (DSNE) are the erosion
baselines. Networks without identity skips get random dropout after every
activation (DSNE also rescales the surviving elements). Residual networks
keep their activations and get random identity-skip factors instead, with
a fixed DSNE factor on the residual branch.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from django.conf import settings

from .exceptions import ConfigError, RejectedInputError
from .layers import Hooks
from .models import ModelView
from .rng import rng_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneIndicator:
    """
    Static prunable set of a model.

    Attributes:
        masks: per prunable parameter, boolean array (True = prunable)
        gamma: magnitude of the largest prunable weight (0 when none)
        r: prunable rate
        kappa: number of prunable-flagged weights in the model
    """
    masks: Dict[str, np.ndarray] = field(repr=False)
    gamma: float
    r: float
    kappa: int

    @property
    def count(self):
        return int(sum(int(m.sum()) for m in self.masks.values()))


@dataclass(frozen=True)
class PruneMask:
    """
    Bernoulli draw b aligned with a PruneIndicator.

    Attributes:
        bits: per prunable parameter, boolean array
        p_bern: Bernoulli probability
        rng_label: label tuple the draw came from
    """
    bits: Dict[str, np.ndarray] = field(repr=False)
    p_bern: float
    rng_label: Tuple

    @property
    def count(self):
        return int(sum(int(b.sum()) for b in self.bits.values()))


@dataclass(frozen=True)
class ErosionParams:
    """
    Parameters of the GN/DSNE erosion baselines. The field defaults are the
    identity erosion; `defaults(mode)` gives the configured baseline.

    Attributes:
        mode: 'gn' or 'dsne'
        drop_rate: probability of zeroing an activation element
        skip_range: identity-skip factor ~ U[1 - skip_range, 1 + skip_range]
        scale_range: DSNE elementwise factor ~ U[1 - scale_range, 1 + scale_range]
        bias_gamma: DSNE fixed factor on the residual branch
    """
    mode: str = 'gn'
    drop_rate: float = 0.0
    skip_range: float = 0.0
    scale_range: float = 0.0
    bias_gamma: float = 1.0

    def __post_init__(self):
        if self.mode not in ('gn', 'dsne'):
            raise ConfigError(f"unknown erosion mode {self.mode!r}", 'mode')
        for name in ('drop_rate', 'skip_range', 'scale_range'):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}", name)
        if not 0 < self.bias_gamma <= 1:
            raise ConfigError(f"bias_gamma must lie in (0, 1], got {self.bias_gamma}", 'bias_gamma')

    @classmethod
    def defaults(cls, mode):
        """Baseline parameters of `mode` from settings.EROSION_DEFAULTS."""
        if mode not in settings.EROSION_DEFAULTS:
            raise ConfigError(f"unknown erosion mode {mode!r}", 'mode')
        return cls(mode=mode, **settings.EROSION_DEFAULTS[mode])

    def to_dict(self):
        return {'mode': self.mode, 'drop_rate': self.drop_rate, 'skip_range': self.skip_range,
                'scale_range': self.scale_range, 'bias_gamma': self.bias_gamma}


def prunable_count(r, kappa):
    """floor(r * kappa), robust to r * kappa landing a hair below an integer."""
    return int(math.floor(round(r * kappa, 9)))


def compute_prunable_indicator(model, r) -> PruneIndicator:
    """
    Mark the floor(r * kappa) lowest-|w| kernel weights as prunable.

    Ties are broken by (parameter name, flat index), so exactly that many
    weights are marked.

    Raises:
        RejectedInputError: r outside [0, 1] or no prunable parameters.
    """
    if not 0 <= r <= 1:
        raise RejectedInputError(f"prunable rate must lie in [0, 1], got {r}")
    names = sorted(name for name, p in model.params.items() if p.prunable)
    if not names:
        raise RejectedInputError(f"{model.arch_name} has no prunable parameters")
    params = model.params
    magnitudes = np.concatenate([np.abs(params[name].value.astype(np.float64).ravel()) for name in names])
    kappa = magnitudes.size
    count = prunable_count(r, kappa)
    order = np.argsort(magnitudes, kind='stable')
    flat = np.zeros(kappa, dtype=bool)
    flat[order[:count]] = True
    gamma = float(magnitudes[order[count - 1]]) if count else 0.0

    masks, offset = {}, 0
    for name in names:
        size = params[name].value.size
        masks[name] = flat[offset:offset + size].reshape(params[name].value.shape)
        offset += size
    logger.debug("%s: %d of %d weights prunable at r=%.3f (gamma=%.4g)", model.arch_name, count, kappa, r, gamma)
    return PruneIndicator(masks=masks, gamma=gamma, r=float(r), kappa=kappa)


def sample_prune_mask(indicator: PruneIndicator, p_bern, rng_label) -> PruneMask:
    """Draw b_i ~ Bernoulli(p_bern) independently over the prunable universe."""
    if not 0 <= p_bern <= 1:
        raise RejectedInputError(f"p_bern must lie in [0, 1], got {p_bern}")
    rng = rng_for(*rng_label)
    draws = rng.random(indicator.kappa) < p_bern
    bits, offset = {}, 0
    for name, mask in indicator.masks.items():
        bits[name] = draws[offset:offset + mask.size].reshape(mask.shape)
        offset += mask.size
    return PruneMask(bits=bits, p_bern=float(p_bern), rng_label=tuple(rng_label))


def prune_weights(model, indicator: PruneIndicator, mask: PruneMask) -> ModelView:
    """
    View whose weight i is zero where indicator and mask are both set, and
    the original weight elsewhere. The base model is never modified.

    Raises:
        RejectedInputError: indicator or mask is not aligned with the model.
    """
    params = model.params
    overrides = {}
    for name, prunable in indicator.masks.items():
        if name not in params or params[name].value.shape != prunable.shape:
            raise RejectedInputError(f"Prune indicator entry {name} does not match the model")
        bits = mask.bits.get(name)
        if bits is None or bits.shape != prunable.shape:
            raise RejectedInputError(f"Prune mask entry {name} does not match the indicator")
        value = params[name].value
        zeroed = prunable & bits
        if zeroed.any():
            overrides[name] = np.where(zeroed, np.zeros((), dtype=value.dtype), value)
    if isinstance(model, ModelView):
        merged = dict(model.overrides)
        merged.update(overrides)
        return ModelView(base=model.base, overrides=merged, hooks=model.hooks)
    return ModelView(base=model, overrides=overrides)


class ErosionHooks(Hooks):
    """
    Activation or skip perturbations of GN/DSNE.

    A model with identity-skip blocks is eroded at the skips only: one
    factor per view and block. A model without them is eroded after every
    activation, with draws keyed per sample id so a sample sees the same
    perturbation whatever batch it travels in.
    """

    def __init__(self, params: ErosionParams, rng_label, block_names):
        self.params = params
        self.rng_label = tuple(rng_label)
        self.erode_activations = not block_names
        self.factors = {}
        for k, name in enumerate(block_names):
            low, high = 1.0 - params.skip_range, 1.0 + params.skip_range
            skip = float(rng_for(*self.rng_label, 'skip', k).uniform(low, high)) if params.skip_range else 1.0
            gain = params.bias_gamma if params.mode == 'dsne' else 1.0
            self.factors[name] = (skip, gain)

    def skip_factors(self, name):
        return self.factors.get(name, (1.0, 1.0))

    def activation(self, name, x, run):
        p = self.params
        if not self.erode_activations or (p.drop_rate == 0 and p.scale_range == 0):
            return x
        dtype = x.dtype
        multiplier = np.empty(x.shape, dtype=dtype)
        for k, sample_id in enumerate(run.sample_ids):
            rng = rng_for(*self.rng_label, 'act', name, int(sample_id))
            factor = (rng.random(x.shape[1:]) >= p.drop_rate).astype(dtype)
            if p.mode == 'dsne' and p.scale_range:
                factor *= rng.uniform(1.0 - p.scale_range, 1.0 + p.scale_range, size=x.shape[1:]).astype(dtype)
            multiplier[k] = factor
        return x * multiplier


def _erosion_view(model, params, rng_label):
    base = model.base
    overrides = dict(model.overrides) if isinstance(model, ModelView) else {}
    hooks = ErosionHooks(params, rng_label, base.skip_block_names())
    return ModelView(base=base, overrides=overrides, hooks=hooks)


def ghost_augment(model, params: ErosionParams, rng_label) -> ModelView:
    """Ghost-network view: activation dropout (no rescaling), or random skip factors on residual models."""
    if params.mode != 'gn':
        raise RejectedInputError(f"ghost_augment needs mode 'gn', got {params.mode!r}")
    return _erosion_view(model, params, rng_label)


def dsne_augment(model, params: ErosionParams, rng_label) -> ModelView:
    """DSNE view: dropout with elementwise rescaling, or random skip factors and bias_gamma on residual models."""
    if params.mode != 'dsne':
        raise RejectedInputError(f"dsne_augment needs mode 'dsne', got {params.mode!r}")
    return _erosion_view(model, params, rng_label)
