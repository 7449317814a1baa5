"""
Desk-scale corruption generation
Six natively generated corruption families with a fixed severity table.
Blur, weather and jpeg families are ingested from prepared files instead.
"""

import logging
from pathlib import Path
from typing import Dict, Literal, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field

from ..utils.errors import ConfigurationError, InputError
from .datasets import Dataset, load_dataset

logger = logging.getLogger(__name__)

CorruptionKind = Literal["gaussian_noise", "shot_noise", "impulse_noise", "brightness", "contrast", "pixelate"]

# severity 1..5
SEVERITY_TABLE: Dict[str, Tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),  # noise std
    "shot_noise": (500, 250, 100, 75, 50),  # photon count scale
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),  # salt-and-pepper fraction
    "brightness": (0.05, 0.1, 0.15, 0.2, 0.3),  # additive shift
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),  # contrast factor
    "pixelate": (2, 2, 3, 3, 4),  # block size in pixels
}

NATIVE_CORRUPTIONS = tuple(SEVERITY_TABLE)
EXTERNAL_CORRUPTIONS = (
    "defocus_blur",
    "glass_blur",
    "motion_blur",
    "zoom_blur",
    "snow",
    "frost",
    "fog",
    "elastic_transform",
    "jpeg_compression",
)


class CorruptionSpec(BaseModel):
    """Corruption kind with severity 1-5 (0 is the identity, kept for debugging)"""

    kind: CorruptionKind
    severity: int = Field(ge=0, le=5)
    seed: int = 0

    @property
    def parameter(self) -> float:
        if self.severity == 0:
            raise ConfigurationError("severity 0 has no parameter")
        return SEVERITY_TABLE[self.kind][self.severity - 1]


def corrupt(images: torch.Tensor, spec: CorruptionSpec) -> torch.Tensor:
    """Apply one corruption; output clipped to [0, 1] and deterministic per seed"""
    x = torch.as_tensor(images, dtype=torch.float64)
    if x.dim() != 4:
        raise InputError(f"images must be [N, C, H, W], got {tuple(x.shape)}")
    if x.numel() and (x.min() < 0.0 or x.max() > 1.0):
        raise InputError("images must lie in [0, 1] before corruption")
    if spec.kind not in SEVERITY_TABLE:
        raise ConfigurationError(f"Unknown corruption kind '{spec.kind}'")
    if spec.severity == 0:
        return x.clone()

    array = x.numpy()
    rng = np.random.default_rng(spec.seed)
    value = spec.parameter

    if spec.kind == "gaussian_noise":
        out = array + rng.normal(0.0, value, size=array.shape)
    elif spec.kind == "shot_noise":
        out = rng.poisson(array * value) / value
    elif spec.kind == "impulse_noise":
        out = array.copy()
        draw = rng.uniform(size=array.shape)
        out[draw < value / 2] = 0.0
        out[(draw >= value / 2) & (draw < value)] = 1.0
    elif spec.kind == "brightness":
        out = array + value
    elif spec.kind == "contrast":
        means = array.mean(axis=(1, 2, 3), keepdims=True)
        out = (array - means) * value + means
    else:
        out = _pixelate(array, int(value))

    return torch.from_numpy(np.clip(out, 0.0, 1.0))


def _pixelate(array: np.ndarray, block: int) -> np.ndarray:
    out = np.empty_like(array)
    height, width = array.shape[-2:]
    for top in range(0, height, block):
        for left in range(0, width, block):
            cell = array[..., top : top + block, left : left + block]
            out[..., top : top + block, left : left + block] = cell.mean(axis=(-2, -1), keepdims=True)
    return out


def corrupt_dataset(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Corrupt the pixels of a dataset, labels untouched"""
    logger.debug(f"Corrupting {len(dataset)} images with {spec.kind} s{spec.severity}")
    return dataset.with_images(corrupt(dataset.images, spec))


def corrupted_set_path(directory: Union[str, Path], kind: str, severity: int) -> Path:
    return Path(directory) / f"{kind}_s{severity}.mttt"


def load_corrupted_set(directory: Union[str, Path], kind: str, severity: int) -> Dataset:
    """Ingest an externally prepared corrupted test set"""
    path = corrupted_set_path(directory, kind, severity)
    if not path.exists():
        raise ConfigurationError(f"corruption_dir: no prepared file for {kind} severity {severity} at {path}")
    return load_dataset(path)
