"""
Dataset ingestion for MixTTT
Labeled image tensors stored in the MTTT tensor format, partner sampling,
and the desk-scale synthetic dataset.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch

from ..models.tensor_io import encode_tensors, load_tensors, save_tensors
from ..utils.errors import FormatError, InputError

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Images [N x C x H x W] in [0, 1] with integer main-task labels"""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: Optional[int] = None

    def __post_init__(self) -> None:
        self.images = torch.as_tensor(self.images, dtype=torch.float64)
        self.labels = torch.as_tensor(self.labels).to(torch.int64)
        if self.images.dim() != 4:
            raise InputError(f"images must be [N, C, H, W], got {tuple(self.images.shape)}")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise InputError(
                f"label/sample count mismatch: {tuple(self.labels.shape)} labels for {self.images.shape[0]} images"
            )
        if self.images.numel() and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InputError("pixel values must lie in [0, 1]")
        if self.labels.numel() and self.labels.min() < 0:
            raise InputError("labels must be non-negative")
        if self.num_classes is not None and self.labels.numel() and self.labels.max() >= self.num_classes:
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, indices) -> "Dataset":
        index = torch.as_tensor(indices, dtype=torch.int64)
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def with_images(self, images: torch.Tensor) -> "Dataset":
        """Same labels, new pixels (corruption keeps labels untouched)"""
        return Dataset(images, self.labels.clone(), self.num_classes)

    def to_tensors(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            [
                ("images", self.images.numpy()),
                ("labels", self.labels.numpy().astype(np.float64)),
            ]
        )

    def to_bytes(self) -> bytes:
        return encode_tensors(self.to_tensors())


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write images and labels to an MTTT file"""
    save_tensors(dataset.to_tensors(), path)
    logger.debug(f"Saved {len(dataset)} images to {path}")


def load_dataset(path: Union[str, Path], num_classes: Optional[int] = None) -> Dataset:
    """Read a dataset written by save_dataset (or prepared externally in the same format)"""
    tensors = load_tensors(path)
    if "images" not in tensors or "labels" not in tensors:
        raise FormatError(f"{path}: expected tensors 'images' and 'labels', found {list(tensors)}")

    images, labels = tensors["images"], tensors["labels"]
    if images.ndim != 4:
        raise FormatError(f"{path}: images must have 4 dims, got {images.ndim}")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise FormatError(f"{path}: labels shape {labels.shape} does not match {images.shape[0]} images")
    if labels.size and (not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)) or labels.min() < 0):
        raise FormatError(f"{path}: labels must be non-negative integers")
    if labels.size and labels.max() > np.iinfo(np.uint32).max:
        raise FormatError(f"{path}: labels exceed the u32 range")

    return Dataset(torch.from_numpy(images.copy()), torch.from_numpy(labels.astype(np.int64)), num_classes)


def sample_partners(dataset: Dataset, rng: np.random.Generator, batch_size: int) -> Tuple[torch.Tensor, np.ndarray]:
    """Uniformly draw batch_size distinct training images"""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > len(dataset):
        raise InputError(f"Cannot draw {batch_size} distinct partners from {len(dataset)} images")
    indices = rng.choice(len(dataset), size=batch_size, replace=False)
    return dataset.images[torch.from_numpy(indices)], indices


def make_synthetic_dataset(
    n: int,
    num_classes: int = 10,
    image_size: int = 32,
    channels: int = 3,
    seed: int = 0,
    noise: float = 0.03,
) -> Dataset:
    """
    Desk-scale labeled images.

    Each class is an oriented colour grating (class-specific angle, frequency and
    tint) with random phase, laid over a luminance ramp that is brightest at the top
    so that the rotation of an image is recoverable.
    """
    if n < 1 or num_classes < 1 or image_size < 2 or channels < 1:
        raise InputError("n, num_classes, channels must be >= 1 and image_size >= 2")

    # class appearance is fixed; sample draws vary with the seed
    appearance = np.random.default_rng(12345)
    tints = appearance.uniform(0.3, 1.0, size=(num_classes, channels))
    angles = np.pi * np.arange(num_classes) / num_classes
    frequencies = 1.5 + (np.arange(num_classes) % 3)

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    gains = rng.uniform(0.7, 1.0, size=n)

    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    ramp = 0.65 - 0.3 * yy

    direction = np.cos(angles)[labels, None, None] * xx + np.sin(angles)[labels, None, None] * yy
    grating = np.sin(2.0 * np.pi * frequencies[labels, None, None] * direction + phases[:, None, None])
    grating = 0.3 * gains[:, None, None] * grating

    images = ramp[None, None] + tints[labels][:, :, None, None] * grating[:, None]
    images = images + rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)

    return Dataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), num_classes)
