"""
Dataset containers and parsers: IDX (MNIST), CIFAR-10 binary batches,
a synthetic dataset for offline runs, and targeted-attack assignment files.
"""

import csv
import io
import logging
import os
import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .exceptions import (
    CifarLabelError, CifarLengthError, ConfigError, IdxLengthError, IdxMagicError,
    MissingArtifactError, RejectedInputError, TargetFileError, ValidationError,
)
from .rng import rng_for
from .tensor import Tensor

logger = logging.getLogger(__name__)

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32
TARGET_HEADER = ['id', 'true_label', 'target_label']

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}
CIFAR_FILES = {
    'train': [f'data_batch_{k}.bin' for k in range(1, 6)],
    'test': ['test_batch.bin'],
}


@dataclass(frozen=True)
class Dataset:
    """
    Images in [0, 1] with integer labels and stable ids.

    Attributes:
        images: float32 array (n, C, H, W)
        labels: int64 array (n,)
        ids: int64 array (n,), unique
        num_classes: label range
    """
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise RejectedInputError(f"Dataset images must be (n, C, H, W), got {self.images.shape}")
        n = len(self.images)
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise RejectedInputError("Dataset images, labels and ids disagree in length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise RejectedInputError(f"Dataset labels outside [0, {self.num_classes})")
        if len(np.unique(self.ids)) != n:
            raise RejectedInputError("Dataset ids are not unique")

    def __len__(self):
        return len(self.labels)

    @property
    def input_spec(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.ids[indices], self.num_classes)

    def take(self, n):
        return self.subset(np.arange(min(n, len(self))))

    def select_ids(self, ids):
        """Samples in the order of `ids`."""
        position = {int(i): k for k, i in enumerate(self.ids)}
        try:
            return self.subset([position[int(i)] for i in ids])
        except KeyError as exc:
            raise RejectedInputError(f"Sample id {exc.args[0]} is not in the dataset") from exc


def _read_idx(data: bytes, expected_magic):
    if len(data) < 4:
        raise IdxLengthError(f"IDX blob of {len(data)} bytes has no header")
    magic, = struct.unpack('>I', data[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxLengthError(f"IDX header needs {header} bytes, blob has {len(data)}")
    dims = struct.unpack(f'>{ndim}I', data[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != expected:
        raise IdxLengthError(f"IDX dimensions {dims} need {expected} payload bytes, got {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def parse_idx(data: bytes) -> Tensor:
    """
    Decode an IDX blob. Image files (magic 0x803) are scaled by 1/255;
    label files (magic 0x801) keep their integer values.

    Raises:
        IdxMagicError: the magic is neither of the two.
        IdxLengthError: header or payload length is inconsistent.
    """
    if len(data) >= 4 and struct.unpack('>I', data[:4])[0] == IDX_LABEL_MAGIC:
        return Tensor(_read_idx(data, IDX_LABEL_MAGIC).astype(np.float32))
    raw = _read_idx(data, IDX_IMAGE_MAGIC)
    return Tensor(raw.astype(np.float32) / np.float32(255))


def parse_idx_labels(data: bytes) -> np.ndarray:
    return _read_idx(data, IDX_LABEL_MAGIC).astype(np.int64)


def parse_cifar10(data: bytes) -> Dataset:
    """
    Decode CIFAR-10 binary records: one label byte then 3072 pixel bytes,
    channel-major R, G, B, each plane row-major.

    Raises:
        CifarLengthError: length is not a positive multiple of 3073.
        CifarLabelError: a label byte exceeds 9.
    """
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise CifarLengthError(f"CIFAR-10 blob of {len(data)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CifarLabelError(f"record {int(bad[0])} has label {int(labels[bad[0]])}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return Dataset(images, labels, np.arange(len(labels), dtype=np.int64), num_classes=10)


def _read_file(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"Dataset file {path} does not exist", path)
    with open(path, 'rb') as f:
        return f.read()


def load_mnist(directory, split='train') -> Dataset:
    image_name, label_name = MNIST_FILES[split]
    images = parse_idx(_read_file(os.path.join(directory, image_name))).data
    labels = parse_idx_labels(_read_file(os.path.join(directory, label_name)))
    if len(images) != len(labels):
        raise IdxLengthError(f"MNIST {split}: {len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None, :, :], labels, np.arange(len(labels), dtype=np.int64), num_classes=10)


def load_cifar10(directory, split='train') -> Dataset:
    parts = [parse_cifar10(_read_file(os.path.join(directory, name))) for name in CIFAR_FILES[split]]
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    return Dataset(images, labels, np.arange(len(labels), dtype=np.int64), num_classes=10)


def make_synthetic(n, num_classes=10, shape=(1, 16, 16), seed=0, noise=0.15) -> Dataset:
    """
    Deterministic toy images: every class owns a bright 4x4 patch at its own
    grid position, drawn over uniform noise and jittered by up to one pixel.
    """
    c, h, w = shape
    if h < 8 or w < 8:
        raise ConfigError(f"synthetic images need at least 8x8 pixels, got {shape}", 'shape')
    rng = rng_for(seed, 'synthetic')
    grid = int(np.ceil(np.sqrt(num_classes)))
    cell_h, cell_w = (h - 4) / max(grid - 1, 1), (w - 4) / max(grid - 1, 1)
    labels = np.arange(n, dtype=np.int64) % num_classes
    rng.shuffle(labels)
    images = rng.uniform(0.0, noise, size=(n, c, h, w))
    jitter = rng.integers(-1, 2, size=(n, 2))
    for k, label in enumerate(labels):
        row, col = divmod(int(label), grid)
        top = int(np.clip(round(row * cell_h) + jitter[k, 0], 0, h - 4))
        left = int(np.clip(round(col * cell_w) + jitter[k, 1], 0, w - 4))
        images[k, :, top:top + 4, left:left + 4] = rng.uniform(0.8, 1.0)
    return Dataset(images.astype(np.float32), labels, np.arange(n, dtype=np.int64), num_classes=num_classes)


@dataclass(frozen=True)
class TargetAssignment:
    """Rows of (id, true_label, target_label) with target != true and unique ids."""
    rows: Tuple[Tuple[int, int, int], ...]

    def __post_init__(self):
        seen = set()
        for k, (sample_id, true_label, target) in enumerate(self.rows, start=1):
            if target == true_label:
                raise ValidationError(f"target_label equals true_label ({target}) for id {sample_id}", row=k)
            if sample_id in seen:
                raise ValidationError(f"duplicate id {sample_id}", row=k)
            seen.add(sample_id)

    def __len__(self):
        return len(self.rows)

    @property
    def ids(self):
        return np.array([r[0] for r in self.rows], dtype=np.int64)

    @property
    def true_labels(self):
        return np.array([r[1] for r in self.rows], dtype=np.int64)

    @property
    def targets(self):
        return np.array([r[2] for r in self.rows], dtype=np.int64)

    def take(self, n):
        return TargetAssignment(self.rows[:n])


def assign_targets(dataset: Dataset, num_classes, seed) -> TargetAssignment:
    """
    Draw one target per sample uniformly from the classes other than its
    label; the draw depends only on (seed, id).

    Raises:
        ConfigError: fewer than two classes.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be at least 2, got {num_classes}", 'num_classes')
    rows = []
    for sample_id, label in zip(dataset.ids, dataset.labels):
        k = int(rng_for(seed, 'target', int(sample_id)).integers(num_classes - 1))
        rows.append((int(sample_id), int(label), k if k < label else k + 1))
    return TargetAssignment(tuple(rows))


def load_targets(data: bytes) -> TargetAssignment:
    """
    Parse the "id,true_label,target_label" CSV.

    Raises:
        TargetFileError: not UTF-8, missing header, wrong column count, non-integer cell.
        ValidationError: target equals true label, or an id repeats.
    """
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as exc:
        raise TargetFileError(f"target file is not UTF-8 text: {exc}") from exc
    reader = csv.reader(io.StringIO(text, newline=''))
    header = next(reader, None)
    if header != TARGET_HEADER:
        raise TargetFileError(f"expected header {','.join(TARGET_HEADER)!r}, got {header!r}")
    rows: List[Tuple[int, int, int]] = []
    for k, record in enumerate(reader, start=1):
        if not record:
            continue
        if len(record) != 3:
            raise TargetFileError(f"row {k}: expected 3 columns, got {len(record)}")
        try:
            rows.append(tuple(int(v) for v in record))
        except ValueError as exc:
            raise TargetFileError(f"row {k}: {exc}") from exc
    return TargetAssignment(tuple(rows))


def dump_targets(assignment: TargetAssignment) -> bytes:
    lines = [','.join(TARGET_HEADER)]
    lines.extend(f"{i},{t},{g}" for i, t, g in assignment.rows)
    return ('\n'.join(lines) + '\n').encode('utf-8')
