"""Procedural glyph dataset: small grayscale shapes, one template per class.

Every sample is a jittered render of its class template (random center
shift, size factor, stroke intensity) over a dim background plus Gaussian
pixel noise, clipped to [0, 1].  Class of sample i is ``i % classes``, so
any contiguous slice stays balanced within one sample per class.

File format ``TADS1``: magic, version byte, little-endian u32 header
(n, H, W, C, classes, seed), float64 pixels, u32 labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import struct

from .errors import ConfigurationError, FormatError

DATASET_MAGIC = b"TADS1"
DATASET_VERSION = 1


@dataclass
class DatasetFile:
    images: np.ndarray  # (n, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (n,) int
    classes: int
    seed: int

    @property
    def count(self) -> int:
        return int(self.images.shape[0])


def _template(cls: int, yy, xx, cy, cx, size):
    """Soft indicator of the class-``cls`` glyph on the pixel grid."""
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    if cls == 0:  # filled disk
        return (r <= size).astype(float)
    if cls == 1:  # ring
        return ((r <= size) & (r >= size * 0.55)).astype(float)
    if cls == 2:  # plus
        return ((np.abs(dy) <= 1.0) | (np.abs(dx) <= 1.0)).astype(float) * (
            r <= size * 1.4
        )
    if cls == 3:  # diagonal cross
        return (
            (np.abs(dy - dx) <= 1.2) | (np.abs(dy + dx) <= 1.2)
        ).astype(float) * (r <= size * 1.4)
    if cls == 4:  # horizontal bars
        return ((np.floor(yy / 2.0) % 2) == 0).astype(float) * (
            np.abs(dy) <= size
        )
    if cls == 5:  # vertical bars
        return ((np.floor(xx / 2.0) % 2) == 0).astype(float) * (
            np.abs(dx) <= size
        )
    if cls == 6:  # checkerboard patch
        return (((np.floor(yy / 2.0) + np.floor(xx / 2.0)) % 2) == 0).astype(
            float
        ) * (np.maximum(np.abs(dy), np.abs(dx)) <= size)
    if cls == 7:  # hollow square frame
        box = np.maximum(np.abs(dy), np.abs(dx))
        return ((box <= size) & (box >= size - 1.6)).astype(float)
    raise ConfigurationError(f"no glyph template for class {cls}")


def generate_dataset(
    seed: int,
    n: int = 4000,
    height: int = 16,
    width: int = 16,
    channels: int = 1,
    classes: int = 8,
) -> DatasetFile:
    if min(n, height, width, channels) < 1:
        raise ConfigurationError("dataset extents must be positive")
    if classes < 2:
        raise ConfigurationError("need at least two classes")
    if classes > 8:
        raise ConfigurationError("at most 8 glyph classes are defined")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij"
    )
    images = np.empty((n, height, width, channels))
    labels = np.arange(n, dtype=np.int64) % classes
    base_size = min(height, width) * 0.28
    for i in range(n):
        cls = int(labels[i])
        cy = height / 2.0 - 0.5 + rng.uniform(-2.0, 2.0)
        cx = width / 2.0 - 0.5 + rng.uniform(-2.0, 2.0)
        size = base_size * rng.uniform(0.8, 1.2)
        glyph = _template(cls, yy, xx, cy, cx, size)
        # low contrast and strong pixel noise keep decision margins small,
        # so the standard perturbation budget can actually cross them
        amplitude = rng.uniform(0.3, 0.55)
        background = rng.uniform(0.15, 0.3)
        img = background + amplitude * glyph
        img = img + rng.normal(0.0, 0.22, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)[:, :, None].repeat(channels, axis=2)
    return DatasetFile(images=images, labels=labels, classes=classes, seed=seed)


def save_dataset(data: DatasetFile, path) -> None:
    n, h, w, c = data.images.shape
    if not 0 <= data.seed < 2**32:
        raise ConfigurationError("dataset seed must fit in 32 bits")
    blob = bytearray()
    blob += DATASET_MAGIC
    blob += struct.pack("<B", DATASET_VERSION)
    blob += struct.pack("<6I", n, h, w, c, data.classes, data.seed)
    blob += np.ascontiguousarray(data.images, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(data.labels, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_dataset(path) -> DatasetFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = len(DATASET_MAGIC) + 1 + 24
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError("bad magic in dataset file", offset=0)
    if blob[len(DATASET_MAGIC)] != DATASET_VERSION:
        raise FormatError("unsupported dataset version", offset=len(DATASET_MAGIC))
    if len(blob) < header:
        raise FormatError("truncated dataset header", offset=len(blob))
    n, h, w, c, classes, seed = struct.unpack(
        "<6I", blob[len(DATASET_MAGIC) + 1 : header]
    )
    pixel_bytes = n * h * w * c * 8
    label_bytes = n * 4
    if len(blob) != header + pixel_bytes + label_bytes:
        raise FormatError(
            "dataset payload has wrong length", offset=min(len(blob), header)
        )
    images = (
        np.frombuffer(blob, dtype="<f8", count=n * h * w * c, offset=header)
        .reshape(n, h, w, c)
        .copy()
    )
    labels = np.frombuffer(
        blob, dtype="<u4", count=n, offset=header + pixel_bytes
    ).astype(np.int64)
    if labels.size and labels.max() >= classes:
        raise FormatError("dataset labels exceed class count", offset=header + pixel_bytes)
    return DatasetFile(images=images, labels=labels, classes=classes, seed=seed)
