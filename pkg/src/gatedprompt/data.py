"""Labeled tensor datasets, their binary file format, and the synthetic
depth-selective task.

The generator builds class templates out of per-patch color blocks, adds
noise, then applies ``depth`` rounds of a fixed squash-mix-permute
transform. At depth 0 a linear probe on raw pixels separates the classes;
each extra round buries the class signal one nonlinear mixing level deeper,
which gives tests a knob over where in a network the useful features live.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    PayloadMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"GPDATA\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIII")  # magic, version, n, H, W, C, classes, tag length


@dataclass
class LabeledDataset:
    images: np.ndarray  # [n x H x W x C] float64
    labels: np.ndarray  # [n] int32
    num_classes: int
    split_tag: str = "full"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be [n x H x W x C], got shape {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise ConfigError("dataset must contain at least one sample")
        if self.labels.shape != (n,):
            raise ConfigError(f"labels shape {self.labels.shape} does not match n={n}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]


def generate_depth_selective(seed: int, n: int, num_classes: int, depth: int,
                             image_size: int = 32, channels: int = 3,
                             patch_size: int = 8, noise: float = 0.1) -> LabeledDataset:
    """Balanced synthetic classification task whose informative features sit
    ``depth`` nonlinear mixing levels below the pixels."""
    if depth < 0:
        raise ConfigError(f"depth must be >= 0, got {depth}")
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if n < num_classes or n % num_classes != 0:
        raise ConfigError(f"n={n} must be a positive multiple of num_classes={num_classes}")
    if image_size % patch_size != 0:
        raise ConfigError(f"image_size {image_size} not divisible by patch_size {patch_size}")

    rng = np.random.default_rng(seed)
    grid = image_size // patch_size
    pdim = patch_size * patch_size * channels
    n_patches = grid * grid

    # Per-class template: one color block per patch cell, upsampled to pixels.
    blocks = rng.uniform(-1.0, 1.0, size=(num_classes, grid, grid, channels))
    templates = np.repeat(np.repeat(blocks, patch_size, axis=1), patch_size, axis=2)

    # Fixed mixing stack: per level an orthogonal in-patch mix and a patch
    # permutation, shared by every sample.
    mixers, perms = [], []
    for _ in range(depth):
        q, r = np.linalg.qr(rng.standard_normal((pdim, pdim)))
        mixers.append(q * np.sign(np.diag(r)))
        perms.append(rng.permutation(n_patches))

    labels = rng.permutation(np.repeat(np.arange(num_classes, dtype=np.int32), n // num_classes))
    images = templates[labels] + noise * rng.standard_normal((n, image_size, image_size, channels))

    if depth > 0:
        x = (images.reshape(n, grid, patch_size, grid, patch_size, channels)
                   .transpose(0, 1, 3, 2, 4, 5).reshape(n, n_patches, pdim))
        for q, perm in zip(mixers, perms):
            x = np.tanh(x) @ q.T
            x = x[:, perm, :]
        images = (x.reshape(n, grid, grid, patch_size, patch_size, channels)
                   .transpose(0, 1, 3, 2, 4, 5).reshape(n, image_size, image_size, channels))

    return LabeledDataset(images=images, labels=labels, num_classes=num_classes)


def save_dataset(path, ds: LabeledDataset) -> None:
    n, h, w, c = ds.images.shape
    tag = ds.split_tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, h, w, c, ds.num_classes, len(tag)))
        fh.write(tag)
        fh.write(ds.images.astype("<f8").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the dims header")
    magic, version, n, h, w, c, classes, tag_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported dataset version {version}")
    offset = _HEADER.size
    if len(raw) < offset + tag_len:
        raise TruncatedFileError(f"{path}: split tag truncated")
    tag = raw[offset:offset + tag_len].decode("utf-8")
    offset += tag_len

    image_bytes = n * h * w * c * 8
    label_bytes = n * 4
    available = len(raw) - offset
    if available < image_bytes + label_bytes:
        raise TruncatedFileError(
            f"{path}: payload has {available} bytes, dims header needs "
            f"{image_bytes + label_bytes}")
    if available != image_bytes + label_bytes:
        raise PayloadMismatchError(
            f"{path}: dims header declares {image_bytes + label_bytes} payload bytes "
            f"but {available} are present")
    images = np.frombuffer(raw, dtype="<f8", count=n * h * w * c,
                           offset=offset).reshape(n, h, w, c).copy()
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=offset + image_bytes).copy()
    return LabeledDataset(images=images, labels=labels, num_classes=classes, split_tag=tag)


def split(ds: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint, exhaustive, class-stratified split; per-class train counts
    are within one sample of ``fraction`` times the class size."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie strictly in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        if k < 1 or k >= idx.size:
            raise ConfigError(
                f"split leaves class {cls} empty on one side "
                f"({k} of {idx.size} samples at fraction {fraction})")
        train_idx.append(idx[:k])
        val_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return (
        LabeledDataset(ds.images[tr], ds.labels[tr], ds.num_classes, split_tag="train"),
        LabeledDataset(ds.images[va], ds.labels[va], ds.num_classes, split_tag="val"),
    )
