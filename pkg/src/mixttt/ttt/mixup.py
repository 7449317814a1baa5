"""
Mixing test samples with training partners
Ratios are stored as the weight on the test sample.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator

from ..data.datasets import Dataset, sample_partners
from ..utils.errors import InputError

logger = logging.getLogger(__name__)

DEFAULT_PARTNER_BATCH = 32


class MixupRatioSpec(BaseModel):
    """Uniform ratio distribution U[low, high] over the weight on the test sample"""

    low: float = Field(ge=0.0, le=1.0)
    high: float = Field(ge=0.0, le=1.0)
    sampling_granularity: Literal["per_step", "per_pair"] = "per_pair"

    @model_validator(mode="after")
    def _ordered(self) -> "MixupRatioSpec":
        if self.low > self.high:
            raise ValueError(f"ratio low {self.low} exceeds high {self.high}")
        return self

    @classmethod
    def from_training_weight(cls, low: float, high: float, **kwargs) -> "MixupRatioSpec":
        """Build from bounds on the weight of the training sample"""
        return cls(low=1.0 - high, high=1.0 - low, **kwargs)


@dataclass
class MixedBatch:
    """Mixed inputs with their provenance; partner_ids are -1 for unmixed rows"""

    inputs: torch.Tensor
    partner_ids: np.ndarray
    ratios: torch.Tensor
    test_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class TrainPartnerPool:
    """Training images available as mixing partners"""

    dataset: Dataset

    def __post_init__(self) -> None:
        if len(self.dataset) == 0:
            raise InputError("Training partner pool is empty")

    def __len__(self) -> int:
        return len(self.dataset)

    def sample(self, rng: np.random.Generator, batch_size: int):
        # with replacement only when the batch outgrows the pool
        if batch_size <= len(self.dataset):
            return sample_partners(self.dataset, rng, batch_size)
        indices = rng.choice(len(self.dataset), size=batch_size, replace=True)
        return self.dataset.images[torch.from_numpy(indices)], indices


def sample_ratio(spec: MixupRatioSpec, rng: np.random.Generator) -> float:
    return float(rng.uniform(spec.low, spec.high))


def mix_pair(x_test: torch.Tensor, x_train: torch.Tensor, ratio_on_test) -> torch.Tensor:
    """ratio * x_test + (1 - ratio) * x_train; exact at ratio 0 and 1"""
    if tuple(x_test.shape) != tuple(x_train.shape):
        raise InputError(f"Cannot mix shapes {tuple(x_test.shape)} and {tuple(x_train.shape)}")
    weight = torch.as_tensor(ratio_on_test, dtype=x_test.dtype)
    return torch.lerp(x_train.to(x_test.dtype), x_test, weight)


def _as_test_batch(test_samples: torch.Tensor) -> torch.Tensor:
    batch = torch.as_tensor(test_samples, dtype=torch.float64)
    if batch.dim() == 3:
        batch = batch.unsqueeze(0)
    if batch.dim() != 4 or batch.shape[0] == 0:
        raise InputError(f"test samples must be [T, C, H, W], got {tuple(batch.shape)}")
    return batch


def build_mixed_batch(
    test_samples: torch.Tensor,
    pool: Optional[TrainPartnerPool],
    spec: MixupRatioSpec,
    batch_size: int,
    rng: np.random.Generator,
) -> MixedBatch:
    """
    Pair each of batch_size rows with a training partner.

    A single test sample is repeated on every row; several test samples cycle.
    The ratio is drawn first, then the partners.
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    if pool is None or len(pool) == 0:
        raise InputError("Mixing requires a non-empty training partner pool")

    tests = _as_test_batch(test_samples)
    if tuple(tests.shape[1:]) != tuple(pool.dataset.image_shape):
        raise InputError(f"test shape {tuple(tests.shape[1:])} differs from pool shape {pool.dataset.image_shape}")

    if spec.sampling_granularity == "per_step":
        ratios = np.full(batch_size, sample_ratio(spec, rng))
    else:
        ratios = rng.uniform(spec.low, spec.high, size=batch_size)

    partners, partner_ids = pool.sample(rng, batch_size)
    test_ids = np.arange(batch_size) % tests.shape[0]
    ratio_tensor = torch.from_numpy(ratios.astype(np.float64))
    inputs = mix_pair(tests[torch.from_numpy(test_ids)], partners, ratio_tensor.view(-1, 1, 1, 1))
    return MixedBatch(inputs=inputs, partner_ids=np.asarray(partner_ids), ratios=ratio_tensor, test_ids=test_ids)


def build_plain_batch(test_samples: torch.Tensor, batch_size: int) -> MixedBatch:
    """Unmixed batch: the test samples tiled to batch_size rows with ratio 1"""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    tests = _as_test_batch(test_samples)
    test_ids = np.arange(batch_size) % tests.shape[0]
    return MixedBatch(
        inputs=tests[torch.from_numpy(test_ids)].clone(),
        partner_ids=np.full(batch_size, -1),
        ratios=torch.ones(batch_size, dtype=torch.float64),
        test_ids=test_ids,
    )
