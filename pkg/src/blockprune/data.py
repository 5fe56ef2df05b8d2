"""Labeled image datasets: CIFAR-10 binary batches and a seeded synthetic set."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import Rng
from .tensor import DTYPE

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


class DataFormatError(ValueError):
    """A dataset file does not have the expected layout."""


class CorruptRecordError(ValueError):
    """A record in a well-formed file holds an impossible value."""


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=DTYPE)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if images.ndim != 4:
            raise ValueError(f"images must be [M,C,H,W], got shape {images.shape}")
        if len(images) < 1:
            raise EmptyDatasetError("dataset has no samples")
        if labels.shape != (len(images),):
            raise ValueError(f"{len(images)} images but labels have shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx], split=split or self.split)


def load_cifar10_binary(paths: Sequence[str | Path] | str | Path, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches: per record one label byte then 3072 planar RGB bytes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    offset = 0
    for path in paths:
        blob = Path(path).read_bytes()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD:
            expected = max(1, round(len(blob) / CIFAR_RECORD)) * CIFAR_RECORD
            raise DataFormatError(
                f"{path}: length {len(blob)} bytes is not a multiple of {CIFAR_RECORD} "
                f"(nearest valid length {expected} bytes)"
            )
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] >= 10)
        if bad.size:
            raise CorruptRecordError(f"{path}: record {offset + int(bad[0])} has label byte {rec[bad[0], 0]} >= 10")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(DTYPE) / DTYPE(255))
        offset += len(rec)
    if not images:
        raise EmptyDatasetError("no CIFAR-10 files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, split)


def write_cifar10_binary(path, images_u8: np.ndarray, labels) -> None:
    """Inverse of the loader for uint8 [M,3,32,32] images; used for fixtures."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    Path(path).write_bytes(rec.tobytes())


def synth_dataset(num_classes: int, per_class: int, shape=(3, 16, 16), seed: int = 0) -> Dataset:
    """Class templates drawn uniformly from [0,1] plus N(0, 0.25^2) per-sample noise, clipped to [0,1].

    Samples are stored class-major (all of class 0, then class 1, ...).
    """
    if per_class < 1 or num_classes < 1:
        raise EmptyDatasetError(f"synthetic dataset needs per_class >= 1 and num_classes >= 1, got {per_class}, {num_classes}")
    rng = Rng(seed)
    shape = tuple(shape)
    templates = rng.spawn("templates").uniform((num_classes, *shape))
    noise = rng.spawn("noise").normal((num_classes * per_class, *shape), 0.25)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.clip(templates[labels] + noise, 0, 1)
    return Dataset(images, labels, num_classes, "train")


def normalize(ds: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    c = ds.images.shape[1]
    mean = np.asarray(mean, dtype=DTYPE).reshape(-1)
    std = np.asarray(std, dtype=DTYPE).reshape(-1)
    if mean.size != c or std.size != c:
        raise ValueError(f"need {c} per-channel mean/std values, got {mean.size} and {std.size}")
    if np.any(std == 0):
        raise ValueError("normalization std must be non-zero")
    images = (ds.images - mean.reshape(1, c, 1, 1)) / std.reshape(1, c, 1, 1)
    return replace(ds, images=images)


def split(ds: Dataset, fractions: Sequence[float] = (0.8, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    """Seeded shuffle, then consecutive partitions sized by ``fractions``.

    Sizes are ``round(f * M)`` for all but the last part, which takes the rest.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) < 2 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be >= 2 non-negative numbers summing to 1, got {fractions}")
    m = len(ds)
    order = Rng(seed).permutation(m)
    sizes = [int(round(f * m)) for f in fractions[:-1]]
    sizes.append(m - sum(sizes))
    if min(sizes) < 1:
        raise EmptyDatasetError(f"split of {m} samples by {fractions} leaves an empty part")
    names = ["train", "val", "test"] + [f"part{i}" for i in range(3, len(fractions))]
    parts, start = [], 0
    for name, size in zip(names, sizes):
        parts.append(ds.subset(order[start : start + size], name))
        start += size
    return tuple(parts)


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(ds)) if shuffle_seed is None else Rng(shuffle_seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]
