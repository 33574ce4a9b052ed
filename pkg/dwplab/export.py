"""
Plain-file artifacts: LF-terminated CSV tables, JSON records and 8-bit
PGM/PPM previews of images and heatmaps.
"""

import csv
import io
import json
import logging
import os

import numpy as np
from PIL import Image

from .exceptions import RejectedInputError

logger = logging.getLogger(__name__)


def csv_bytes(header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue().encode('utf-8')


def write_bytes(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(data)
    return path


def json_bytes(record):
    return (json.dumps(record, indent=2, sort_keys=True) + '\n').encode('utf-8')


def quantize(image):
    """[0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def to_pil(image):
    """
    (1, H, W), (H, W) or (3, H, W) array in [0, 1] to a Pillow image
    (mode L or RGB).
    """
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim == 2:
        return Image.fromarray(quantize(image), mode='L')
    if image.ndim == 3 and image.shape[0] == 3:
        return Image.fromarray(quantize(image.transpose(1, 2, 0)), mode='RGB')
    raise RejectedInputError(f"Cannot export an image of shape {image.shape}")


def export_pgm(images, directory, ids, prefix='x'):
    """
    Write one PGM (one channel) or PPM (three channels) per image as
    `<prefix>_<id>.pgm|ppm` and return the written paths.
    """
    images = np.asarray(images)
    if len(images) != len(ids):
        raise RejectedInputError(f"{len(ids)} ids for {len(images)} images")
    os.makedirs(directory, exist_ok=True)
    paths = []
    for image, sample_id in zip(images, ids):
        picture = to_pil(image)
        suffix = 'pgm' if picture.mode == 'L' else 'ppm'
        path = os.path.join(directory, f"{prefix}_{int(sample_id)}.{suffix}")
        picture.save(path, format='PPM')
        paths.append(path)
    logger.debug("Exported %d images to %s", len(paths), directory)
    return paths
