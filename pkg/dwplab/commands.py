"""
Command handlers behind the command-line group.

Each handler takes a RunConfig, writes its artifacts under
`<output_dir>/<command>/` (checkpoints go to the shared checkpoint
directory) and finishes with a `manifest.json` echoing the resolved
configuration. Failures surface as LabError subclasses; the front end
turns them into error records.
"""

import logging
import os

import numpy as np
from django.conf import settings

from .architectures import GRADCAM_LAYERS, ROBUST_SUFFIX, base_architecture, build_architecture, is_robust_twin
from .attack import run_attack
from .checkpoint import read_checkpoint, save_adversarial_batch, write_checkpoint
from .config import default_data_dir
from .data import (
    assign_targets, dump_targets, load_cifar10, load_mnist, load_targets, make_synthetic,
)
from .diagnostics import (
    DecayTable, TransferExperiment, ablate_prunable_rate, accuracy_decay_curve, config_for_augmentation,
    cosine_matrix, count_inversions, gradcam_map, heatmap_iou, leave_one_out, targeted_success_rate,
)
from .exceptions import MissingArtifactError, RejectedInputError
from .export import csv_bytes, export_pgm, json_bytes, write_bytes
from .kernels import KernelSpec
from .training import adversarial_train, evaluate_accuracy, robust_accuracy, train_model

logger = logging.getLogger(__name__)

CHECKPOINT_SUFFIX = '.dwpm'
PREVIEW_COUNT = 16


class Run:
    """Output directory of one command plus the artifacts written so far."""

    def __init__(self, command, config, jobs=1, progress=False):
        self.command = command
        self.config = config
        self.jobs = jobs
        self.progress = progress
        self.directory = os.path.join(config.output_dir, command)
        self.artifacts = []
        self.summary = {}
        os.makedirs(self.directory, exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.directory, *parts)

    def write(self, name, data):
        path = write_bytes(self.path(name), data)
        self.artifacts.append(os.path.relpath(path, self.config.output_dir))
        logger.info("Wrote %s", path)
        return path

    def record(self, path):
        self.artifacts.append(os.path.relpath(path, self.config.output_dir))

    def finish(self):
        manifest = {
            'command': self.command,
            'seed': self.config.seed,
            'config': self.config.to_dict(),
            'artifacts': sorted(self.artifacts),
            'summary': self.summary,
        }
        write_bytes(self.path('manifest.json'), json_bytes(manifest))
        return manifest


########### Inputs ###########

def load_datasets(config):
    """(train, eval) datasets for the configured kind."""
    ds = config.dataset
    if ds.kind == 'synthetic':
        train = make_synthetic(ds.train_size or 2000, ds.num_classes, ds.shape, seed=config.seed)
        held_out = make_synthetic(ds.eval_size, ds.num_classes, ds.shape, seed=config.seed + 1)
        return train, held_out
    directory = ds.path or os.path.join(default_data_dir(), ds.kind)
    loader = load_mnist if ds.kind == 'mnist' else load_cifar10
    train, held_out = loader(directory, 'train'), loader(directory, 'test')
    if ds.train_size:
        train = train.take(ds.train_size)
    return train, held_out.take(ds.eval_size)


def load_assignment(config, dataset):
    """Targets from the configured CSV, or drawn from the run seed."""
    if config.dataset.targets:
        path = config.dataset.targets
        if not os.path.exists(path):
            raise MissingArtifactError(f"target file {path} does not exist", path)
        with open(path, 'rb') as f:
            assignment = load_targets(f.read())
        dataset.select_ids(assignment.ids)
        return assignment
    return assign_targets(dataset, config.dataset.num_classes, config.seed)


def checkpoint_path(config, name):
    return os.path.join(config.checkpoint_dir, name + CHECKPOINT_SUFFIX)


def load_zoo(config, names=None):
    names = config.zoo.architectures if names is None else names
    return {name: read_checkpoint(checkpoint_path(config, name)) for name in names}


########### Commands ###########

def train_command(run):
    """Train every natural zoo architecture and write its checkpoint; robust twins come from advtrain."""
    config = run.config
    train, held_out = load_datasets(config)
    rows = []
    for name in config.zoo.architectures:
        if is_robust_twin(name):
            logger.info("Skipping %s; the advtrain command writes robust twins", name)
            continue
        model = build_architecture(name, train.input_spec, config.dataset.num_classes, seed=config.seed)
        trained = train_model(model, train, config.zoo.train, progress=run.progress)
        path = checkpoint_path(config, name)
        write_checkpoint(trained, path)
        run.record(path)
        accuracy = evaluate_accuracy(trained, held_out)
        logger.info("Trained %s: train accuracy %.4f, eval accuracy %.4f",
                    name, trained.metadata['train_accuracy'], accuracy)
        rows.append([name, f"{trained.metadata['train_accuracy']:.6f}", f"{accuracy:.6f}"])
    run.write('accuracy.csv', csv_bytes(['arch', 'train_accuracy', 'eval_accuracy'], rows))
    run.summary['models'] = len(rows)


def advtrain_command(run):
    """PGD-train the listed architectures; compare with natural twins when present."""
    config = run.config
    if not config.zoo.adversarial:
        raise RejectedInputError("zoo.adversarial lists no architectures")
    train, held_out = load_datasets(config)
    pgd = config.zoo.pgd
    rows = []
    for name in config.zoo.adversarial:
        model = build_architecture(name, train.input_spec, config.dataset.num_classes, seed=config.seed)
        robust = adversarial_train(model, train, config.zoo.train, pgd, progress=run.progress)
        path = checkpoint_path(config, name + ROBUST_SUFFIX)
        write_checkpoint(robust, path)
        run.record(path)
        twins = [('adversarial', robust)]
        if os.path.exists(checkpoint_path(config, name)):
            twins.insert(0, ('natural', read_checkpoint(checkpoint_path(config, name))))
        else:
            logger.warning("No natural checkpoint for %s; robustness table lists the adversarial twin only", name)
        for variant, twin in twins:
            clean = evaluate_accuracy(twin, held_out)
            under_pgd = robust_accuracy(twin, held_out, pgd)
            rows.append([name, variant, f"{clean:.6f}", f"{under_pgd:.6f}"])
    run.write('robustness.csv', csv_bytes(['arch', 'variant', 'clean_accuracy', 'pgd_accuracy'], rows))
    run.summary['models'] = len(config.zoo.adversarial)


def attack_command(run):
    """One attack with the configured white-box ensemble."""
    config = run.config
    _, held_out = load_datasets(config)
    assignment = load_assignment(config, held_out)
    chosen = held_out.select_ids(assignment.ids)
    names = config.experiment.white_box or config.zoo.architectures
    zoo = load_zoo(config, names)
    models = list(zoo.values())

    x_adv = run_attack(chosen.images, assignment.targets, config.attack, models, sample_ids=chosen.ids,
                       jobs=run.jobs, progress=run.progress)
    path = run.path('adversarial.dwpm')
    save_adversarial_batch(path, x_adv, chosen.ids, assignment.targets, config.attack.to_dict())
    run.record(path)
    run.write('targets.csv', dump_targets(assignment))
    count = min(PREVIEW_COUNT, len(x_adv))
    for written in export_pgm(x_adv[:count], run.path('previews'), chosen.ids[:count], prefix='adv'):
        run.record(written)

    run.summary['white_box_success'] = {
        name: targeted_success_rate(model, x_adv, assignment.targets, sample_ids=chosen.ids)
        for name, model in zoo.items()
    }
    delta = np.abs(x_adv.astype(np.float64) - chosen.images.astype(np.float64))
    run.summary['max_linf'] = float(delta.max()) if delta.size else 0.0


def _experiment(run):
    config = run.config
    _, held_out = load_datasets(config)
    assignment = load_assignment(config, held_out)
    return TransferExperiment(load_zoo(config), held_out, assignment, config.attack,
                              jobs=run.jobs, progress=run.progress)


def eval_command(run):
    """Leave-one-out transfer over the configured augmentations."""
    experiment = _experiment(run)
    report = leave_one_out(experiment.zoo, experiment.dataset, experiment.assignment, experiment.config,
                           augmentations=run.config.experiment.augmentations, jobs=run.jobs, progress=run.progress)
    run.write('transfer.csv', report.to_csv())
    run.summary.update(report.summary())


def ablate_r_command(run):
    """Prunable-rate sweep."""
    table = ablate_prunable_rate(run.config.experiment.r_grid, _experiment(run))
    run.write('ablation_r.csv', table.to_csv())
    best = max(table.rows, key=lambda row: row[2])
    run.summary['best_r'] = best[0]
    run.summary['best_mean_rate'] = best[2]


def diag_cosine_command(run):
    """Perturbation cosine matrix over pruned instances of every zoo model."""
    config = run.config
    _, held_out = load_datasets(config)
    assignment = load_assignment(config, held_out).take(config.experiment.cosine_images)
    chosen = held_out.select_ids(assignment.ids)
    nes_config = config.attack.replace(scale_copies=1, p_di=0.0, kernel=KernelSpec('delta', 1),
                                       augmentation='none', betas=None)
    matrix = cosine_matrix(load_zoo(config), config.experiment.cosine_instances, chosen.images,
                           assignment.targets, nes_config, sample_ids=chosen.ids)
    run.write('cosine.csv', matrix.to_csv())
    summary = matrix.summary()
    summary['offdiag_below_threshold'] = summary['offdiag_mean_abs'] < settings.COSINE_OFFDIAG_THRESHOLD
    run.write('cosine_summary.json', json_bytes(summary))
    run.summary.update(summary)


def diag_decay_command(run):
    """Accuracy of randomly pruned zoo models against the pruned fraction."""
    config = run.config
    _, held_out = load_datasets(config)
    rows, inversions = [], {}
    for name, model in load_zoo(config).items():
        table = accuracy_decay_curve(model, config.experiment.decay_rate_grid, config.experiment.masks_per_point,
                                     held_out, p_bern=config.attack.p_bern, seed=config.seed)
        rows.extend(table.records())
        inversions[name] = count_inversions(table.means)
    run.write('decay.csv', csv_bytes(DecayTable.header, rows))
    run.summary['inversions'] = inversions


def diag_gradcam_command(run):
    """
    Heatmaps of every victim on clean images (true class) and on images
    attacked by the other models (target class), per augmentation.
    """
    config = run.config
    _, held_out = load_datasets(config)
    assignment = load_assignment(config, held_out).take(config.experiment.gradcam_images)
    chosen = held_out.select_ids(assignment.ids)
    zoo = load_zoo(config)
    layers = dict(GRADCAM_LAYERS)
    layers.update(config.experiment.gradcam_layers)
    if len(zoo) < 2:
        raise RejectedInputError("diag-gradcam needs at least two zoo models")

    rows, overlaps = [], []
    for victim, model in zoo.items():
        layer = layers[victim] if victim in layers else layers[base_architecture(victim)]
        ensemble = [m for name, m in zoo.items() if name != victim]
        batches = [('clean', chosen.images, chosen.labels)]
        for augmentation in config.experiment.augmentations:
            cfg = config_for_augmentation(config.attack, augmentation)
            x_adv = run_attack(chosen.images, assignment.targets, cfg, ensemble, sample_ids=chosen.ids,
                               jobs=run.jobs, progress=run.progress)
            batches.append((augmentation, x_adv, assignment.targets))
        for label, images, classes in batches:
            for image, sample_id, clean, cls in zip(images, chosen.ids, chosen.images, classes):
                heatmap = gradcam_map(model, image, int(cls), layer).data
                iou = heatmap_iou(heatmap, clean)
                name = f"{label}_{int(sample_id)}.pgm"
                export_pgm(heatmap[None, None], run.path('heatmaps', victim), [sample_id], prefix=label)
                run.record(run.path('heatmaps', victim, name))
                rows.append([victim, label, int(sample_id), int(cls), f"{iou:.6f}",
                             os.path.join('heatmaps', victim, name)])
                if label == 'clean':
                    overlaps.append(iou)
    run.write('gradcam.csv', csv_bytes(['arch', 'input', 'id', 'class_index', 'iou', 'path'], rows))
    run.summary['clean_mean_iou'] = float(np.mean(overlaps)) if overlaps else 0.0
    run.summary['clean_iou_above_threshold'] = run.summary['clean_mean_iou'] > settings.GRADCAM_IOU_THRESHOLD


COMMANDS = {
    'train': train_command,
    'advtrain': advtrain_command,
    'attack': attack_command,
    'eval': eval_command,
    'ablate-r': ablate_r_command,
    'diag-cosine': diag_cosine_command,
    'diag-decay': diag_decay_command,
    'diag-gradcam': diag_gradcam_command,
}


def dispatch(command, config, jobs=1, progress=False):
    """
    Run one command and write its manifest.

    Returns:
        The manifest dictionary.
    """
    if command not in COMMANDS:
        raise RejectedInputError(f"unknown command {command!r}")
    run = Run(command, config, jobs=jobs, progress=progress)
    logger.info("Running %s (seed %d) into %s", command, config.seed, run.directory)
    COMMANDS[command](run)
    return run.finish()
