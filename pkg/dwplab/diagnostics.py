"""
Transfer measurement and analysis experiments.

    targeted_success_rate   black-box hit rate of a batch of adversarial images
    leave_one_out           transfer table: each model in turn is the victim
    ablate_prunable_rate    leave-one-out sweep over the DWP prunable rate
    cosine_matrix           pairwise cosine of perturbations from pruned instances
    accuracy_decay_curve    accuracy of randomly pruned models vs pruned fraction
    gradcam_map             class activation heatmap of one image
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from .attack import AttackConfig, run_attack
from .augment import compute_prunable_indicator, prune_weights, sample_prune_mask
from .exceptions import ConfigError, RejectedInputError
from .export import csv_bytes
from .models import evaluate, predict
from .tensor import Tensor, upsample_bilinear
from .training import evaluate_accuracy

logger = logging.getLogger(__name__)

TRANSFER_HEADER = ['white_box_set', 'black_box_model', 'augmentation', 'targeted_success_rate', 'n_samples', 'seed']


@dataclass(frozen=True)
class TransferRow:
    """
    One leave-one-out measurement. `white_box_success` is the mean targeted
    success on the ensemble members themselves, kept out of the CSV.
    """
    white_box_set: str
    black_box_model: str
    augmentation: str
    targeted_success_rate: float
    n_samples: int
    seed: int
    white_box_success: float = float('nan')

    def __post_init__(self):
        if not 0 <= self.targeted_success_rate <= 1:
            raise RejectedInputError(f"success rate {self.targeted_success_rate} outside [0, 1]")
        if self.n_samples <= 0:
            raise RejectedInputError("transfer rows need at least one sample")


@dataclass(frozen=True)
class TransferReport:
    rows: Tuple[TransferRow, ...]

    def to_csv(self):
        return csv_bytes(TRANSFER_HEADER, [
            [r.white_box_set, r.black_box_model, r.augmentation, f"{r.targeted_success_rate:.6f}", r.n_samples, r.seed]
            for r in self.rows
        ])

    def mean_rate(self, augmentation):
        rates = [r.targeted_success_rate for r in self.rows if r.augmentation == augmentation]
        return float(np.mean(rates)) if rates else float('nan')

    def rate(self, black_box_model, augmentation):
        for row in self.rows:
            if row.black_box_model == black_box_model and row.augmentation == augmentation:
                return row.targeted_success_rate
        raise KeyError((black_box_model, augmentation))

    def summary(self):
        augmentations = list(dict.fromkeys(r.augmentation for r in self.rows))
        return {
            'mean_targeted_success': {a: self.mean_rate(a) for a in augmentations},
            'mean_white_box_success': {
                a: float(np.mean([r.white_box_success for r in self.rows if r.augmentation == a]))
                for a in augmentations
            },
        }


def targeted_success_rate(blackbox, x_adv, targets, sample_ids=None, batch_size=256):
    """
    Fraction of samples the black-box model classifies as their target.

    Raises:
        RejectedInputError: empty batch or misaligned targets.
    """
    x_adv = np.asarray(x_adv.data if isinstance(x_adv, Tensor) else x_adv)
    targets = np.asarray(targets, dtype=np.int64)
    if len(x_adv) == 0:
        raise RejectedInputError("Cannot score an empty batch")
    if len(targets) != len(x_adv):
        raise RejectedInputError(f"{len(targets)} targets for {len(x_adv)} images")
    predictions = predict(blackbox, x_adv.astype(blackbox.dtype, copy=False), batch_size=batch_size,
                          sample_ids=sample_ids)
    return float(np.mean(predictions == targets))


def _attack_inputs(dataset, assignment):
    chosen = dataset.select_ids(assignment.ids)
    if len(chosen) == 0:
        raise RejectedInputError("Target assignment selects no samples")
    return chosen.images, assignment.targets, chosen.ids


def config_for_augmentation(config, augmentation):
    """Copy of `config` switched to `augmentation`, keeping erosion settings only when they match."""
    erosion = config.erosion if config.erosion is not None and config.erosion.mode == augmentation else None
    return config.replace(augmentation=augmentation, betas=None, erosion=erosion)


def leave_one_out(zoo: Dict[str, object], dataset, assignment, config: AttackConfig, augmentations=('none', 'dwp'),
                  jobs=1, progress=False) -> TransferReport:
    """
    Every zoo member in turn is the black-box victim while the others form
    an equally weighted white-box ensemble; one attack per augmentation.

    Args:
        zoo: architecture name -> trained model, in roster order
        dataset: source of the clean images
        assignment: ids to attack and their target labels
    """
    if len(zoo) < 2:
        raise RejectedInputError("leave-one-out needs at least two models")
    images, targets, ids = _attack_inputs(dataset, assignment)
    rows = []
    for victim, blackbox in zoo.items():
        white = [name for name in zoo if name != victim]
        ensemble = [zoo[name] for name in white]
        for augmentation in augmentations:
            cfg = config_for_augmentation(config, augmentation)
            x_adv = run_attack(images, targets, cfg, ensemble, sample_ids=ids, jobs=jobs, progress=progress)
            rate = targeted_success_rate(blackbox, x_adv, targets, sample_ids=ids)
            white_rate = float(np.mean([targeted_success_rate(m, x_adv, targets, sample_ids=ids) for m in ensemble]))
            logger.info("Victim %s, %s: targeted success %.4f (white-box %.4f)", victim, augmentation, rate, white_rate)
            rows.append(TransferRow('+'.join(white), victim, augmentation, rate, len(images), cfg.seed, white_rate))
    return TransferReport(tuple(rows))


@dataclass(frozen=True)
class TransferExperiment:
    """Everything a leave-one-out run needs besides the swept parameter."""
    zoo: Dict[str, object]
    dataset: object
    assignment: object
    config: AttackConfig
    jobs: int = 1
    progress: bool = False


@dataclass(frozen=True)
class AblationTable:
    black_box_models: Tuple[str, ...]
    rows: Tuple[Tuple[float, Tuple[float, ...], float], ...]

    @property
    def header(self):
        return ['r'] + [f'rate_{name}' for name in self.black_box_models] + ['mean_rate']

    def to_csv(self):
        return csv_bytes(self.header, [
            [f"{r:g}"] + [f"{v:.6f}" for v in rates] + [f"{mean:.6f}"] for r, rates, mean in self.rows
        ])


def ablate_prunable_rate(r_grid: Sequence[float], experiment: TransferExperiment) -> AblationTable:
    """Leave-one-out DWP transfer for every prunable rate in the grid."""
    for r in r_grid:
        if not 0 <= r <= 1:
            raise ConfigError(f"prunable rate {r} outside [0, 1]", 'r_grid')
    names = tuple(experiment.zoo)
    rows = []
    for r in r_grid:
        report = leave_one_out(experiment.zoo, experiment.dataset, experiment.assignment,
                               experiment.config.replace(r=float(r)), augmentations=('dwp',),
                               jobs=experiment.jobs, progress=experiment.progress)
        rates = tuple(report.rate(name, 'dwp') for name in names)
        rows.append((float(r), rates, float(np.mean(rates))))
        logger.info("r=%.2f: mean targeted success %.4f", r, rows[-1][2])
    return AblationTable(names, tuple(rows))


@dataclass(frozen=True)
class CosineMatrix:
    """
    Mean pairwise cosine similarity of perturbations from pruned instances.

    Attributes:
        values: symmetric square matrix with unit diagonal
        labels: (base model name, instance index) per row
    """
    values: np.ndarray = field(repr=False)
    labels: Tuple[Tuple[str, int], ...]

    def _pairs(self, same_block):
        n = len(self.labels)
        picked = []
        for a in range(n):
            for b in range(a + 1, n):
                if (self.labels[a][0] == self.labels[b][0]) == same_block:
                    picked.append(self.values[a, b])
        return np.array(picked)

    def summary(self):
        intra, inter = self._pairs(True), self._pairs(False)
        both = np.concatenate([intra, inter])
        return {
            'intra_mean': float(intra.mean()) if intra.size else float('nan'),
            'inter_mean': float(inter.mean()) if inter.size else float('nan'),
            'offdiag_mean_abs': float(np.abs(both).mean()) if both.size else float('nan'),
        }

    @property
    def header(self):
        return ['row'] + [f"{name}#{k}" for name, k in self.labels]

    def to_csv(self):
        return csv_bytes(self.header, [
            [f"{name}#{k}"] + [f"{v:.6f}" for v in self.values[i]] for i, (name, k) in enumerate(self.labels)
        ])


def _validate_nes_config(config):
    if config.scale_copies != 1 or config.p_di != 0 or config.kernel.family != 'delta':
        raise ConfigError("the cosine diagnostic runs NI only: scale_copies=1, p_di=0 and a delta kernel", 'attack')


def cosine_matrix(base_models: Dict[str, object], n_instances, images, targets, nes_config: AttackConfig,
                  sample_ids=None) -> CosineMatrix:
    """
    For every base model draw `n_instances` fixed pruned instances, attack
    each alone with NI, and average the per-image cosine similarity of the
    flattened perturbations over the image set.
    """
    _validate_nes_config(nes_config)
    images = np.asarray(images)
    perturbations, labels = [], []
    attack_config = nes_config.replace(augmentation='none', betas=None)
    for b, (name, model) in enumerate(base_models.items()):
        indicator = compute_prunable_indicator(model, nes_config.r)
        for j in range(n_instances):
            mask = sample_prune_mask(indicator, nes_config.p_bern, (nes_config.seed, 'cosine', b, j))
            view = prune_weights(model, indicator, mask)
            x_adv = run_attack(images, targets, attack_config, [view], sample_ids=sample_ids)
            delta = (x_adv.astype(np.float64) - images.astype(np.float64)).reshape(len(images), -1)
            perturbations.append(delta)
            labels.append((name, j))

    stacked = np.stack(perturbations)  # instances, images, pixels
    norms = np.linalg.norm(stacked, axis=2, keepdims=True)
    units = np.divide(stacked, norms, out=np.zeros_like(stacked), where=norms > 0)
    gram = np.einsum('aid,bid->ab', units, units) / len(images)
    upper = np.triu(np.clip(gram, -1.0, 1.0), 1)
    values = upper + upper.T
    np.fill_diagonal(values, 1.0)
    return CosineMatrix(values=values, labels=tuple(labels))


@dataclass(frozen=True)
class DecayTable:
    arch_name: str
    rows: Tuple[Tuple[float, float, float, float, float], ...]  # q, r, p_bern, mean, std

    header = ['arch', 'q', 'r', 'p_bern', 'mean_accuracy', 'std_accuracy']

    def records(self):
        return [[self.arch_name, f"{q:g}", f"{r:g}", f"{p:g}", f"{m:.6f}", f"{s:.6f}"] for q, r, p, m, s in self.rows]

    def to_csv(self):
        return csv_bytes(self.header, self.records())

    @property
    def means(self):
        return [row[3] for row in self.rows]


def decay_parameters(q, p_bern):
    """Split an expected pruned fraction q into (r, p_bern) with r <= 1."""
    if not 0 <= q <= 1:
        raise ConfigError(f"pruned fraction {q} outside [0, 1]", 'rate_grid')
    if q == 0:
        return 0.0, p_bern
    r = min(1.0, q / p_bern)
    return r, q / r


def accuracy_decay_curve(model, rate_grid, masks_per_point, dataset, p_bern=0.5, seed=0) -> DecayTable:
    """
    Mean and standard deviation of accuracy over `masks_per_point` random
    DWP masks, per expected pruned fraction q = r * p_bern.
    """
    if masks_per_point < 1:
        raise ConfigError("masks_per_point must be at least 1", 'masks_per_point')
    rows = []
    for point, q in enumerate(rate_grid):
        r, p = decay_parameters(float(q), p_bern)
        if r == 0:
            clean = evaluate_accuracy(model, dataset)
            rows.append((float(q), r, p, clean, 0.0))
            continue
        indicator = compute_prunable_indicator(model, r)
        accuracies = [
            evaluate_accuracy(prune_weights(model, indicator, sample_prune_mask(indicator, p, (seed, 'decay', point, k))),
                              dataset)
            for k in range(masks_per_point)
        ]
        rows.append((float(q), r, p, float(np.mean(accuracies)), float(np.std(accuracies))))
        logger.info("%s q=%.2f: accuracy %.4f +- %.4f", model.arch_name, q, rows[-1][3], rows[-1][4])
    return DecayTable(model.arch_name, tuple(rows))


def count_inversions(values):
    """Number of adjacent increases in a sequence expected to be non-increasing."""
    return int(sum(1 for a, b in zip(values, values[1:]) if b > a))


def gradcam_map(model, x, class_index, layer_name) -> Tensor:
    """
    GradCAM heatmap in [0, 1] at the input resolution.

    Channel weights are the spatial means of d z_class / d A; the map is
    relu(sum_c a_c A_c), bilinearly upsampled and min-max normalized. An
    all-zero map stays all zero.

    Raises:
        RejectedInputError: unknown layer, non-spatial layer, bad class.
    """
    data = np.asarray(x.data if isinstance(x, Tensor) else x)
    if data.ndim == 3:
        data = data[None]
    if data.shape[0] != 1:
        raise RejectedInputError("gradcam_map takes a single image")
    if layer_name not in model.layer_names():
        raise RejectedInputError(f"{model.arch_name} has no layer named {layer_name!r}")
    if not 0 <= class_index < model.num_classes:
        raise RejectedInputError(f"class index {class_index} out of range")

    recorded = {}
    leaf = Tensor(data, requires_grad=True)
    logits, _ = evaluate(model, leaf, recorded=recorded)
    activation = recorded[layer_name]
    if activation.ndim != 4:
        raise RejectedInputError(f"layer {layer_name!r} is not a spatial feature map")
    upstream = np.zeros_like(logits.data)
    upstream[0, class_index] = 1
    logits.backward(upstream)

    grad = activation.grad if activation.grad is not None else np.zeros_like(activation.data)
    coefficients = grad[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(coefficients, activation.data[0], axes=(0, 0)), 0).astype(np.float64)
    cam = np.maximum(upsample_bilinear(cam, data.shape[2], data.shape[3]), 0)
    low, high = cam.min(), cam.max()
    if high - low > 0:
        return Tensor((cam - low) / (high - low))
    return Tensor(np.ones_like(cam) if high > 0 else np.zeros_like(cam))


def heatmap_iou(heatmap, image, heat_threshold=0.5, ink_threshold=0.5):
    """
    IoU between the hot region of a heatmap and the bounding box of the
    bright pixels of an image (its channel maximum).
    """
    ink = np.asarray(image).max(axis=0) > ink_threshold
    if not ink.any():
        return 0.0
    rows, cols = np.flatnonzero(ink.any(axis=1)), np.flatnonzero(ink.any(axis=0))
    box = np.zeros_like(ink)
    box[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = True
    hot = np.asarray(heatmap) >= heat_threshold
    union = np.logical_or(hot, box).sum()
    return float(np.logical_and(hot, box).sum() / union) if union else 0.0
