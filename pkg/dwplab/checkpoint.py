"""
Binary container for models, adversarial batches and pruning masks.

Layout:
    magic "DWPM" (4 bytes) | version u32 LE | manifest length u64 LE |
    UTF-8 JSON manifest | concatenated raw little-endian scalar blobs

Manifest entries carry {name, shape, dtype, byte_offset, byte_len} plus any
kind-specific fields (role/prunable for model parameters). Offsets are
relative to the start of the blob section.
"""

import json
import logging
import os
import struct
from dataclasses import replace

import numpy as np

from .architectures import build_architecture
from .augment import PruneIndicator, PruneMask
from .exceptions import (
    BadMagicError, ManifestMismatchError, MissingArtifactError, TruncatedBlobError, VersionMismatchError,
)
from .models import Parameter

logger = logging.getLogger(__name__)

MAGIC = b'DWPM'
VERSION = 1
HEADER = struct.Struct('<4sIQ')

DTYPES = {'f32': '<f4', 'f64': '<f8', 'u8': 'u1', 'i64': '<i8'}


def _dtype_name(array):
    for name, code in DTYPES.items():
        reference = np.dtype(code)
        if array.dtype.kind == reference.kind and array.dtype.itemsize == reference.itemsize:
            return name
    raise ManifestMismatchError(f"unsupported dtype {array.dtype}")


def pack_container(manifest, arrays):
    """
    Serialize `arrays` (sequence of (entry fields, ndarray)) under `manifest`.

    The entries list is written to manifest['entries'] in the given order.
    """
    entries, blobs, offset = [], [], 0
    for fields, array in arrays:
        array = np.asarray(array)
        name = _dtype_name(array)
        blob = np.ascontiguousarray(array, dtype=np.dtype(DTYPES[name])).tobytes()
        entry = dict(fields)
        entry.update({'shape': list(array.shape), 'dtype': name, 'byte_offset': offset, 'byte_len': len(blob)})
        entries.append(entry)
        blobs.append(blob)
        offset += len(blob)
    body = dict(manifest)
    body['entries'] = entries
    encoded = json.dumps(body, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return HEADER.pack(MAGIC, VERSION, len(encoded)) + encoded + b''.join(blobs)


def unpack_container(data: bytes):
    """
    Parse a container into (manifest, [(entry, ndarray), ...]).

    Raises:
        BadMagicError, VersionMismatchError, TruncatedBlobError,
        ManifestMismatchError
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"container magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < HEADER.size:
        raise TruncatedBlobError(f"container header needs {HEADER.size} bytes, got {len(data)}")
    _, version, manifest_len = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, expected {VERSION}")
    blob_start = HEADER.size + manifest_len
    if len(data) < blob_start:
        raise TruncatedBlobError(f"manifest declares {manifest_len} bytes, only {len(data) - HEADER.size} present")
    try:
        manifest = json.loads(data[HEADER.size:blob_start].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ManifestMismatchError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get('entries'), list):
        raise ManifestMismatchError("manifest lacks an entries list")

    blobs = memoryview(data)[blob_start:]
    arrays, expected_offset = [], 0
    for entry in manifest['entries']:
        try:
            code = np.dtype(DTYPES[entry['dtype']])
            shape = tuple(int(v) for v in entry['shape'])
            offset, length = int(entry['byte_offset']), int(entry['byte_len'])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestMismatchError(f"malformed manifest entry {entry!r}") from exc
        if length != int(np.prod(shape, dtype=np.int64)) * code.itemsize:
            raise ManifestMismatchError(f"entry {entry.get('name')}: byte_len {length} disagrees with shape {shape}")
        if offset != expected_offset:
            raise ManifestMismatchError(f"entry {entry.get('name')}: byte_offset {offset}, expected {expected_offset}")
        if offset + length > len(blobs):
            raise TruncatedBlobError(
                f"entry {entry.get('name')} needs bytes up to {offset + length}, blob section holds {len(blobs)}"
            )
        array = np.frombuffer(blobs[offset:offset + length], dtype=code).reshape(shape).copy()
        arrays.append((entry, array))
        expected_offset = offset + length
    if expected_offset != len(blobs):
        raise ManifestMismatchError(f"blob section holds {len(blobs)} bytes, manifest declares {expected_offset}")
    return manifest, arrays


def _write(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(payload)


def _read(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"{path} does not exist", path)
    with open(path, 'rb') as f:
        return f.read()


########### Models ###########

def checkpoint_bytes(model):
    manifest = {
        'kind': 'model',
        'arch_name': model.arch_name,
        'input_spec': list(model.input_spec),
        'num_classes': model.num_classes,
        'metadata': dict(model.metadata),
    }
    arrays = [({'name': p.name, 'role': p.role, 'prunable': p.prunable}, p.value) for p in model.params.values()]
    return pack_container(manifest, arrays)


def model_from_bytes(data):
    manifest, arrays = unpack_container(data)
    if manifest.get('kind') != 'model':
        raise ManifestMismatchError(f"container holds {manifest.get('kind')!r}, not a model")
    try:
        skeleton = build_architecture(manifest['arch_name'], manifest['input_spec'], manifest['num_classes'])
    except KeyError as exc:
        raise ManifestMismatchError(f"model manifest lacks {exc.args[0]}") from exc
    expected = skeleton.params
    values = {}
    for entry, array in arrays:
        name = entry.get('name')
        if name not in expected:
            raise ManifestMismatchError(f"unknown parameter {name} for {manifest['arch_name']}")
        spec = expected[name]
        if entry.get('role') != spec.role or entry.get('prunable') != spec.prunable:
            raise ManifestMismatchError(f"parameter {name}: role/prunable flags disagree with the architecture")
        if array.shape != spec.value.shape:
            raise ManifestMismatchError(f"parameter {name}: shape {array.shape}, expected {spec.value.shape}")
        values[name] = array
    missing = set(expected) - set(values)
    if missing:
        raise ManifestMismatchError(f"checkpoint lacks parameters {sorted(missing)}")
    params = {name: Parameter(name, expected[name].role, expected[name].prunable, values[name]) for name in expected}
    return replace(skeleton, params=params, metadata=manifest.get('metadata', {}))


def write_checkpoint(model, path):
    _write(path, checkpoint_bytes(model))
    logger.info("Wrote checkpoint %s (%s)", path, model.arch_name)


def read_checkpoint(path):
    return model_from_bytes(_read(path))


########### Adversarial batches ###########

def save_adversarial_batch(path, images, ids, targets, config_echo):
    manifest = {
        'kind': 'adversarial_batch',
        'ids': [int(i) for i in ids],
        'targets': [int(t) for t in targets],
        'config': config_echo,
    }
    _write(path, pack_container(manifest, [({'name': 'images'}, np.asarray(images))]))


def load_adversarial_batch(path):
    """Return (images, ids, targets, config_echo)."""
    manifest, arrays = unpack_container(_read(path))
    if manifest.get('kind') != 'adversarial_batch' or len(arrays) != 1:
        raise ManifestMismatchError(f"{path} is not an adversarial batch")
    return (arrays[0][1], np.asarray(manifest['ids'], dtype=np.int64),
            np.asarray(manifest['targets'], dtype=np.int64), manifest.get('config'))


########### Pruning masks ###########

def save_mask(path, indicator, mask=None):
    manifest = {'kind': 'prune_mask', 'gamma': indicator.gamma, 'r': indicator.r, 'kappa': indicator.kappa,
                'p_bern': None if mask is None else mask.p_bern,
                'rng_label': None if mask is None else [
                    v.item() if isinstance(v, np.generic) else v for v in mask.rng_label]}
    arrays = [({'name': name, 'part': 'indicator'}, m.astype(np.uint8)) for name, m in indicator.masks.items()]
    if mask is not None:
        arrays += [({'name': name, 'part': 'bits'}, b.astype(np.uint8)) for name, b in mask.bits.items()]
    _write(path, pack_container(manifest, arrays))


def load_mask(path):
    """Return (PruneIndicator, PruneMask or None)."""
    manifest, arrays = unpack_container(_read(path))
    if manifest.get('kind') != 'prune_mask':
        raise ManifestMismatchError(f"{path} is not a prune mask")
    masks = {e['name']: a.astype(bool) for e, a in arrays if e.get('part') == 'indicator'}
    bits = {e['name']: a.astype(bool) for e, a in arrays if e.get('part') == 'bits'}
    indicator = PruneIndicator(masks=masks, gamma=manifest['gamma'], r=manifest['r'], kappa=manifest['kappa'])
    mask = PruneMask(bits=bits, p_bern=manifest['p_bern'], rng_label=tuple(manifest['rng_label'])) if bits else None
    return indicator, mask
