"""IDX digit files, the generated-rotation protocol and input preprocessing.

IDX layout (big-endian): u32 magic, u32 count, then for images u32 rows and
u32 cols, followed by the raw u8 payload.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import rotate_interp

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    pass


class IdxFormatError(DataError):
    pass


class IdxConsistencyError(DataError):
    pass


@dataclass
class IdxDataset:
    images: np.ndarray  # (count, H, W) uint8
    labels: np.ndarray  # (count,) uint8

    def __post_init__(self):
        if self.images.ndim != 3 or self.labels.ndim != 1:
            raise IdxConsistencyError(f"bad shapes {self.images.shape} / {self.labels.shape}")
        if len(self.images) != len(self.labels):
            raise IdxConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "IdxDataset":
        return IdxDataset(self.images[idx], self.labels[idx])


def parse_idx_images(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 16:
        raise IdxFormatError(f"{name}: {len(buf)} bytes is too short for an image header")
    magic, count, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{name}: image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    need = count * rows * cols
    if len(buf) - 16 < need:
        raise IdxFormatError(f"{name}: truncated, header promises {need} pixel bytes, "
                             f"found {len(buf) - 16}")
    if len(buf) - 16 > need:
        raise IdxFormatError(f"{name}: {len(buf) - 16 - need} trailing bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=16).reshape(count, rows, cols).copy()


def parse_idx_labels(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise IdxFormatError(f"{name}: {len(buf)} bytes is too short for a label header")
    magic, count = struct.unpack(">II", buf[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{name}: label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    if len(buf) - 8 < count:
        raise IdxFormatError(f"{name}: truncated, header promises {count} labels, found {len(buf) - 8}")
    if len(buf) - 8 > count:
        raise IdxFormatError(f"{name}: {len(buf) - 8 - count} trailing bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).copy()


def _read(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None


def load_idx(images_path, labels_path) -> IdxDataset:
    images = parse_idx_images(_read(images_path), str(images_path))
    labels = parse_idx_labels(_read(labels_path), str(labels_path))
    if len(images) != len(labels):
        raise IdxConsistencyError(
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    return IdxDataset(images, labels)


def idx_image_bytes(images: np.ndarray) -> bytes:
    n, h, w = images.shape
    return struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + np.ascontiguousarray(images, np.uint8).tobytes()


def idx_label_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + np.ascontiguousarray(labels, np.uint8).tobytes()


def save_idx(ds: IdxDataset, images_path, labels_path) -> None:
    for path, payload in ((images_path, idx_image_bytes(ds.images)),
                          (labels_path, idx_label_bytes(ds.labels))):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as f:
            f.write(payload)


def rotate_augment(ds: IdxDataset, seed: int, angles: np.ndarray | None = None) -> IdxDataset:
    """Rotate every image by its own uniform angle in [0, 2*pi), bilinear, zero fill.

    ``angles`` overrides the random draw (one per image).
    """
    if angles is None:
        angles = np.random.default_rng(seed).uniform(0.0, 2 * np.pi, len(ds))
    angles = np.asarray(angles, dtype=float)
    if angles.shape != (len(ds),):
        raise ValueError(f"need {len(ds)} angles, got shape {angles.shape}")
    out = np.empty_like(ds.images)
    for i, (img, th) in enumerate(zip(ds.images, angles)):
        if th == 0.0:
            out[i] = img
            continue
        r = rotate_interp(img.astype(float), float(th))
        out[i] = np.clip(np.rint(r), 0, 255).astype(np.uint8)
    return IdxDataset(out, ds.labels.copy())


def take(ds: IdxDataset, count: int, seed: int) -> IdxDataset:
    """``count`` samples: a seeded permutation, cycled when ``count`` exceeds the set."""
    if count <= 0:
        return ds.subset(slice(0, 0))
    rng = np.random.default_rng(seed)
    reps = -(-count // len(ds))
    idx = np.concatenate([rng.permutation(len(ds)) for _ in range(reps)])[:count]
    return ds.subset(idx)


def to_input(images: np.ndarray, size: int) -> np.ndarray:
    """uint8 (N, H, W) -> float64 (N, 1, size, size) in [0, 1].

    Images are average-pooled 2x2 while larger than ``size``, then zero-padded
    symmetrically up to ``size``.
    """
    x = images.astype(float) / 255.0
    while x.shape[1] > size or x.shape[2] > size:
        n, h, w = x.shape
        if h % 2 or w % 2:
            raise DataError(f"cannot halve {h}x{w} images to fit {size}x{size}")
        x = x.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    n, h, w = x.shape
    out = np.zeros((n, 1, size, size))
    top, left = (size - h) // 2, (size - w) // 2
    out[:, 0, top:top + h, left:left + w] = x
    return out
