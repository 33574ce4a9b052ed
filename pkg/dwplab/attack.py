"""
The iterative targeted attack.

One iteration combines a Nesterov look-ahead, scale copies x / 2^m, the
diverse-input resize-and-pad transform, per-iteration augmentation views of
every ensemble member, beta-weighted gradient fusion, smoothing of the fused
gradient with a translation-invariance kernel, momentum accumulation and a
sign step clipped to the epsilon ball.

Orientation: the loss is J = -z_target and the update subtracts
alpha * sign(g), so every step raises the target logit.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from tqdm import tqdm

from .augment import (
    ErosionParams, compute_prunable_indicator, dsne_augment, ghost_augment, prune_weights,
    sample_prune_mask,
)
from .exceptions import AttackError, ConfigError, RejectedInputError
from .kernels import KernelSpec, depthwise_convolve, make_kernel
from .losses import logit_loss, logit_loss_upstream
from .models import evaluate
from .rng import rng_for
from .tensor import Tensor, resize_pad

logger = logging.getLogger(__name__)

AUGMENTATIONS = ('none', 'dwp', 'gn', 'dsne')
PRESETS = ('ni', 'ni-si', 'ni-si-ti', 'ni-si-ti-di')

__all__ = [
    'AttackConfig', 'AttackState', 'clip_to_budget', 'diverse_input_transform', 'fused_gradient_step',
    'logit_loss', 'nesterov_lookahead', 'run_attack', 'scale_copy',
]


@dataclass(frozen=True)
class AttackConfig:
    """
    Hyperparameters of one attack run. Budgets are on the [0, 1] pixel scale.

    Attributes:
        epsilon: L-inf budget
        alpha: step size
        iters: number of iterations N
        mu: momentum decay
        scale_copies: number of scale copies M
        p_di: probability of the diverse-input transform per sample
        di_range: smallest resize as a fraction of the side length
        kernel: translation-invariance smoothing kernel
        augmentation: none, dwp, gn or dsne
        r: DWP prunable rate
        p_bern: DWP Bernoulli pruning probability
        erosion: GN/DSNE parameters; defaults for the mode when None
        betas: ensemble weights; uniform when None
        loss: only 'logit'
        seed: root of every random stream
    """
    epsilon: float = 16 / 255
    alpha: float = 2 / 255
    iters: int = 100
    mu: float = 1.0
    scale_copies: int = 3
    p_di: float = 0.7
    di_range: float = 0.9
    kernel: KernelSpec = field(default_factory=KernelSpec)
    augmentation: str = 'dwp'
    r: float = 0.7
    p_bern: float = 0.5
    erosion: Optional[ErosionParams] = None
    betas: Optional[Tuple[float, ...]] = None
    loss: str = 'logit'
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError(f"must be non-negative, got {self.epsilon}", 'epsilon')
        if not self.alpha > 0:
            raise ConfigError(f"must be positive, got {self.alpha}", 'alpha')
        if self.iters < 0:
            raise ConfigError(f"must be non-negative, got {self.iters}", 'iters')
        if self.mu < 0:
            raise ConfigError(f"must be non-negative, got {self.mu}", 'mu')
        if self.scale_copies < 1:
            raise ConfigError(f"must be at least 1, got {self.scale_copies}", 'scale_copies')
        if not 0 <= self.p_di <= 1:
            raise ConfigError(f"must lie in [0, 1], got {self.p_di}", 'p_di')
        if not 0 < self.di_range <= 1:
            raise ConfigError(f"must lie in (0, 1], got {self.di_range}", 'di_range')
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation {self.augmentation!r}", 'augmentation')
        if not 0 <= self.r <= 1:
            raise ConfigError(f"must lie in [0, 1], got {self.r}", 'r')
        if not 0 <= self.p_bern <= 1:
            raise ConfigError(f"must lie in [0, 1], got {self.p_bern}", 'p_bern')
        if self.loss != 'logit':
            raise ConfigError(f"unsupported loss {self.loss!r}", 'loss')
        if self.seed < 0:
            raise ConfigError(f"must be non-negative, got {self.seed}", 'seed')
        if self.betas is not None:
            if any(b < 0 for b in self.betas) or abs(sum(self.betas) - 1.0) > 1e-9:
                raise ConfigError("ensemble weights must be non-negative and sum to 1", 'betas')
        if self.erosion is not None and self.augmentation in ('gn', 'dsne') and self.erosion.mode != self.augmentation:
            raise ConfigError(f"erosion mode {self.erosion.mode!r} does not match augmentation", 'erosion')

    @classmethod
    def preset(cls, name, **overrides):
        """
        Component recipes: ni (momentum only), ni-si (+ scale copies),
        ni-si-ti (+ gaussian smoothing), ni-si-ti-di (+ diverse inputs).
        """
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}", 'preset')
        parts = name.split('-')
        settings = {
            'scale_copies': 3 if 'si' in parts else 1,
            'kernel': KernelSpec() if 'ti' in parts else KernelSpec('delta', 1),
            'p_di': 0.7 if 'di' in parts else 0.0,
        }
        settings.update(overrides)
        return cls(**settings)

    def replace(self, **changes):
        return replace(self, **changes)

    def erosion_params(self):
        if self.erosion is not None:
            return self.erosion
        return ErosionParams.defaults(self.augmentation)

    def resolved_betas(self, count):
        if self.betas is None:
            return (1.0 / count,) * count
        if len(self.betas) != count:
            raise RejectedInputError(f"{len(self.betas)} ensemble weights for {count} models")
        return tuple(self.betas)

    def to_dict(self):
        data = asdict(self)
        data['kernel'] = self.kernel.to_dict()
        data['erosion'] = self.erosion.to_dict() if self.erosion is not None else None
        data['betas'] = list(self.betas) if self.betas is not None else None
        return data


@dataclass(frozen=True)
class AttackState:
    """
    Attack progress for one batch.

    Attributes:
        x_n: current adversarial images
        g_prev: accumulated gradient g_{n-1}
        n: index of the next iteration
        x_orig: clean images
        targets: target class per sample
        sample_ids: stable id per sample (keys the per-sample random streams)
    """
    x_n: np.ndarray
    g_prev: np.ndarray
    n: int
    x_orig: np.ndarray
    targets: np.ndarray
    sample_ids: np.ndarray

    @classmethod
    def start(cls, x, targets, sample_ids=None):
        x = np.asarray(x)
        ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
        return cls(x_n=x.copy(), g_prev=np.zeros_like(x), n=0, x_orig=x,
                   targets=np.asarray(targets, dtype=np.int64), sample_ids=ids)


def nesterov_lookahead(state: AttackState, alpha, mu):
    """x_n + alpha * mu * g_{n-1}; no clipping here."""
    return state.x_n + alpha * mu * state.g_prev


def scale_copy(x, m):
    """S_m(x) = x / 2^m, exact for floating point."""
    if m < 0:
        raise RejectedInputError(f"scale index must be non-negative, got {m}")
    return x / float(2 ** m)


def _di_plans(shape, p_di, di_range, rng_label, sample_ids):
    _, _, h, w = shape
    if h != w:
        raise RejectedInputError(f"diverse inputs need square images, got {h}x{w}")
    if p_di == 0:
        return None
    smallest = min(h, math.ceil(round(di_range * h, 9)))
    plans = []
    for sample_id in sample_ids:
        rng = rng_for(*rng_label, int(sample_id))
        if rng.random() >= p_di:
            plans.append(None)
            continue
        size = int(rng.integers(smallest, h + 1))
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        plans.append((size, top, left))
    return plans if any(p is not None for p in plans) else None


def diverse_input_transform(x, p_di, rng_label, sample_ids=None, di_range=0.9):
    """
    With probability p_di per sample: bilinear shrink to s x s with
    s ~ U{ceil(di_range * H), ..., H}, then zero-pad at a random offset back
    to H x W. Otherwise the sample passes unchanged.

    Raises:
        RejectedInputError: images are not square.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    ids = np.arange(len(data)) if sample_ids is None else sample_ids
    plans = _di_plans(data.shape, p_di, di_range, rng_label, ids)
    if plans is None:
        return data.copy()
    return resize_pad(Tensor(data), plans).data


def clip_to_budget(x_adv, x_orig, epsilon):
    """Clamp to [x_orig - epsilon, x_orig + epsilon], then to [0, 1]."""
    bounded = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    return np.clip(bounded, 0, 1)


def _view(model, index, iteration, config, indicator):
    if config.augmentation == 'dwp':
        mask = sample_prune_mask(indicator, config.p_bern, (config.seed, 'dwp', index, iteration))
        return prune_weights(model, indicator, mask)
    if config.augmentation == 'gn':
        return ghost_augment(model, config.erosion_params(), (config.seed, 'gn', index, iteration))
    if config.augmentation == 'dsne':
        return dsne_augment(model, config.erosion_params(), (config.seed, 'dsne', index, iteration))
    return model


def prepare_indicators(config, models):
    """Static prunable sets, one per model; None unless the augmentation is DWP."""
    if config.augmentation != 'dwp':
        return [None] * len(models)
    return [compute_prunable_indicator(model, config.r) for model in models]


def ensemble_gradient(state, config, models, indicators, x_input):
    """
    Sum over models k and scale copies m of beta_k * d J(S_m(T(x))) / dx,
    evaluated at `x_input`, before the 1/M factor and smoothing.
    """
    betas = config.resolved_betas(len(models))
    total = np.zeros_like(x_input)
    for k, model in enumerate(models):
        view = _view(model, k, state.n, config, indicators[k])
        for m in range(config.scale_copies):
            plans = _di_plans(x_input.shape, config.p_di, config.di_range,
                              (config.seed, 'di', state.n, k, m), state.sample_ids)
            leaf = Tensor(x_input, requires_grad=True)
            transformed = resize_pad(leaf, plans) if plans is not None else leaf
            logits, _ = evaluate(view, scale_copy(transformed, m), sample_ids=state.sample_ids)
            logits.backward(logit_loss_upstream(logits.data, state.targets))
            grad = leaf.grad
            if not np.all(np.isfinite(grad)):
                raise AttackError("non-finite input gradient", state.n, k)
            total += betas[k] * grad
    return total


def fused_gradient_step(state: AttackState, config: AttackConfig, models, indicators=None) -> AttackState:
    """
    Advance the attack by one iteration.

    g_n = mu * g_{n-1} + W * (1/M) sum_m sum_k beta_k grad J(S_m(T(x_nes)); view_k)
    x_{n+1} = clip(x_n - alpha * sign(g_n))

    The fused gradient is used raw (no L1 normalization).
    """
    if indicators is None:
        indicators = prepare_indicators(config, models)
    x_nes = nesterov_lookahead(state, config.alpha, config.mu)
    total = ensemble_gradient(state, config, models, indicators, x_nes)
    fused = depthwise_convolve(total / config.scale_copies, make_kernel(config.kernel)).data
    g_n = config.mu * state.g_prev + fused
    x_next = clip_to_budget(state.x_n - config.alpha * np.sign(g_n), state.x_orig, config.epsilon)
    return replace(state, x_n=x_next, g_prev=g_n, n=state.n + 1)


def _attack_chunk(x, targets, sample_ids, config, models, indicators, progress, observer):
    state = AttackState.start(x, targets, sample_ids)
    for _ in tqdm(range(config.iters), desc="attack", disable=not progress, leave=False):
        state = fused_gradient_step(state, config, models, indicators)
        if observer is not None:
            observer(state)
    return state.x_n


def run_attack(x, targets, config: AttackConfig, models, sample_ids=None, jobs=1, progress=False, observer=None):
    """
    Iterate `fused_gradient_step` config.iters times from g_0 = 0, x_0 = x.

    Args:
        x: clean images (batch, C, H, W) in [0, 1]
        targets: target class per sample
        config: attack hyperparameters
        models: white-box ensemble
        sample_ids: stable per-sample ids; defaults to positions
        jobs: number of worker threads; the batch is split into that many
            chunks, and the per-sample random streams make the result
            independent of the split
        observer: optional callable receiving every intermediate AttackState

    Returns:
        Adversarial images with the dtype of the first model.
    """
    if not models:
        raise RejectedInputError("run_attack needs at least one model")
    dtype = models[0].dtype
    x = np.asarray(x, dtype=dtype)
    targets = np.asarray(targets, dtype=np.int64)
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    if len(targets) != len(x) or len(ids) != len(x):
        raise RejectedInputError("images, targets and sample ids disagree in length")
    config.resolved_betas(len(models))
    if config.iters == 0 or len(x) == 0:
        return x.copy()

    indicators = prepare_indicators(config, models)
    logger.info("Attacking %d samples with %d model(s), augmentation=%s, N=%d",
                len(x), len(models), config.augmentation, config.iters)
    if jobs <= 1 or len(x) < 2:
        return _attack_chunk(x, targets, ids, config, models, indicators, progress, observer)

    chunks = np.array_split(np.arange(len(x)), min(jobs, len(x)))
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [
            pool.submit(_attack_chunk, x[idx], targets[idx], ids[idx], config, models, indicators, False, observer)
            for idx in chunks
        ]
        parts = [f.result() for f in futures]
    return np.concatenate(parts)
