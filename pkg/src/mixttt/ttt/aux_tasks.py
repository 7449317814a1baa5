"""
Test-time auxiliary objectives
Rotation prediction, entropy minimization on normalization affine parameters,
and contrastive agreement with feature-moment alignment.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Literal, Optional

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator

from ..models.network import ParameterSelector, SplitNetwork
from ..utils.errors import ConfigurationError, InputError
from .mixup import MixedBatch, MixupRatioSpec

logger = logging.getLogger(__name__)

TaskKind = Literal["rotation", "entropy_min", "contrastive_align"]
ParamSubset = Literal["encoder_full", "norm_affine_only"]

LOG_EPS = 1e-12
DEFAULT_TEMPERATURE = 0.5
CROP_PADDING = 4

DEFAULT_SUBSETS: Dict[str, str] = {
    "rotation": "encoder_full",
    "entropy_min": "norm_affine_only",
    "contrastive_align": "encoder_full",
}
DEFAULT_RATIOS: Dict[str, tuple] = {
    "rotation": (0.7, 1.0),
    "entropy_min": (0.95, 1.0),
    "contrastive_align": (0.9, 1.0),
}


class AuxTaskSpec(BaseModel):
    """Auxiliary loss, the parameters it may update, and its mixing ratios"""

    kind: TaskKind
    param_subset: ParamSubset
    ratio_spec: MixupRatioSpec
    contrastive_weight: float = Field(default=1.0, ge=0.0)
    alignment_weight: float = Field(default=1.0, ge=0.0)
    temperature: float = Field(default=DEFAULT_TEMPERATURE, gt=0.0)

    @model_validator(mode="after")
    def _subset_matches_kind(self) -> "AuxTaskSpec":
        if self.kind == "entropy_min" and self.param_subset != "norm_affine_only":
            raise ValueError("entropy_min updates normalization affine parameters only")
        if self.kind == "rotation" and self.param_subset != "encoder_full":
            raise ValueError("rotation updates the full encoder")
        return self

    @property
    def weights(self) -> Dict[str, float]:
        return {"contrastive": self.contrastive_weight, "alignment": self.alignment_weight}

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "AuxTaskSpec":
        if kind not in DEFAULT_SUBSETS:
            raise ConfigurationError(f"Unknown auxiliary task '{kind}'")
        low, high = DEFAULT_RATIOS[kind]
        values = {
            "kind": kind,
            "param_subset": DEFAULT_SUBSETS[kind],
            "ratio_spec": MixupRatioSpec(low=low, high=high),
        }
        values.update(overrides)
        return cls(**values)


@dataclass
class RotatedBatch:
    """Four rotated copies per source image; label k means k * 90 degrees counter-clockwise"""

    images: torch.Tensor
    labels: torch.Tensor
    source_count: int


@dataclass
class TrainFeatureStats:
    """Mean and variance of encoder features over the training set"""

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self) -> None:
        self.mean = torch.as_tensor(self.mean, dtype=torch.float64)
        self.var = torch.as_tensor(self.var, dtype=torch.float64)
        if self.mean.shape != self.var.shape or self.mean.dim() != 1:
            raise InputError("feature mean and variance must be vectors of equal length")
        if (self.var < 0).any():
            raise InputError("feature variance must be non-negative")

    def to_arrays(self, prefix: str = "feature_stats.") -> Dict[str, np.ndarray]:
        return {f"{prefix}mean": self.mean.numpy(), f"{prefix}var": self.var.numpy()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], prefix: str = "feature_stats.") -> "TrainFeatureStats":
        return cls(torch.from_numpy(arrays[f"{prefix}mean"]), torch.from_numpy(arrays[f"{prefix}var"]))


# ---- rotation -------------------------------------------------------------


def rotation_expand(batch: torch.Tensor) -> RotatedBatch:
    images = torch.as_tensor(batch)
    if images.dim() != 4:
        raise InputError(f"rotation expects [B, C, H, W], got {tuple(images.shape)}")
    if images.shape[2] != images.shape[3]:
        raise InputError(f"rotation needs square images, got {images.shape[2]}x{images.shape[3]}")
    copies = [torch.rot90(images, k, dims=(2, 3)) for k in range(4)]
    labels = torch.arange(4).repeat_interleave(images.shape[0])
    return RotatedBatch(images=torch.cat(copies, dim=0), labels=labels, source_count=int(images.shape[0]))


def rotation_restore(rotated: RotatedBatch) -> torch.Tensor:
    """Undo each copy's rotation; returns [4B, C, H, W]"""
    restored = [
        torch.rot90(rotated.images[i : i + 1], -int(k), dims=(2, 3)) for i, k in enumerate(rotated.labels.tolist())
    ]
    return torch.cat(restored, dim=0)


# ---- losses ---------------------------------------------------------------


def one_hot(labels: torch.Tensor, num_classes: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    return F.one_hot(torch.as_tensor(labels, dtype=torch.int64), num_classes).to(dtype)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean of -y^T log softmax(logits); targets are class indices or (soft) one-hot rows"""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    targets = torch.as_tensor(targets)
    if targets.dim() == 1 and not torch.is_floating_point(targets):
        targets = one_hot(targets, logits.shape[1], logits.dtype)
    elif targets.dim() == 1:
        targets = targets.unsqueeze(0)
    if targets.shape != logits.shape:
        raise InputError(f"targets {tuple(targets.shape)} do not match logits {tuple(logits.shape)}")
    probs = torch.softmax(logits, dim=1)
    return -(targets.to(logits.dtype) * torch.log(probs + LOG_EPS)).sum(dim=1).mean()


def entropy_loss(logits: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy of the softmax rows"""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    probs = torch.softmax(logits, dim=1)
    return -(probs * torch.log(probs + LOG_EPS)).sum(dim=1).mean()


def nt_xent_loss(z_a: torch.Tensor, z_b: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """
    Normalized-temperature agreement loss.

    Row r of z_a and row r of z_b form the positive pair; every other row of
    either view is a negative.
    """
    if z_a.shape != z_b.shape or z_a.dim() != 2:
        raise InputError(f"embedding views must share shape [B, D], got {tuple(z_a.shape)} and {tuple(z_b.shape)}")
    batch = z_a.shape[0]
    if batch < 2:
        raise InputError("contrastive agreement needs at least 2 rows")

    z = F.normalize(torch.cat([z_a, z_b], dim=0), dim=1)
    similarity = z @ z.t() / temperature
    self_mask = torch.eye(2 * batch, dtype=torch.bool)
    similarity = similarity.masked_fill(self_mask, float("-inf"))
    positives = torch.cat([torch.arange(batch, 2 * batch), torch.arange(0, batch)])
    return F.cross_entropy(similarity, positives)


def feature_moments(features: torch.Tensor):
    return features.mean(dim=0), features.var(dim=0, unbiased=False)


def moment_alignment_loss(features: torch.Tensor, stats: TrainFeatureStats) -> torch.Tensor:
    """Squared distance between batch feature mean/variance and the training statistics"""
    mean, var = feature_moments(features)
    target_mean = stats.mean.to(features.dtype)
    target_var = stats.var.to(features.dtype)
    if mean.shape != target_mean.shape:
        raise InputError(f"feature dim {mean.shape[0]} differs from stats dim {target_mean.shape[0]}")
    return ((mean - target_mean) ** 2).sum() + ((var - target_var) ** 2).sum()


def contrastive_alignment_loss(
    network: SplitNetwork,
    test_batch: torch.Tensor,
    mixed_batch: torch.Tensor,
    stats: Optional[TrainFeatureStats],
    weights: Dict[str, float],
    temperature: float = DEFAULT_TEMPERATURE,
    mode: str = "eval",
) -> torch.Tensor:
    """
    Weighted agreement + alignment loss.

    test_batch holds the augmented test view aligned row by row with mixed_batch.
    Agreement is measured on the auxiliary-head projection, alignment on encoder features.
    """
    w_contrast = float(weights.get("contrastive", 1.0))
    w_align = float(weights.get("alignment", 1.0))
    if w_contrast > 0 and mixed_batch.shape[0] < 2:
        raise InputError("contrastive term needs a batch of at least 2")
    if w_align > 0 and stats is None:
        raise ConfigurationError("feature alignment needs training feature statistics")

    mixed_features = network.forward_features(mixed_batch, mode)
    loss = mixed_features.new_zeros(())
    if w_contrast > 0:
        view_projection = network.aux_head(network.forward_features(test_batch, mode))
        mixed_projection = network.aux_head(mixed_features)
        loss = loss + w_contrast * nt_xent_loss(view_projection, mixed_projection, temperature)
    if w_align > 0:
        loss = loss + w_align * moment_alignment_loss(mixed_features, stats)
    return loss


# ---- augmentation and statistics ----------------------------------------------


def augment_views(images: torch.Tensor, rng: np.random.Generator, padding: int = CROP_PADDING) -> torch.Tensor:
    """Random crop after zero padding, then random horizontal flip"""
    batch, _, height, width = images.shape
    padded = F.pad(images, (padding, padding, padding, padding))
    tops = rng.integers(0, 2 * padding + 1, size=batch)
    lefts = rng.integers(0, 2 * padding + 1, size=batch)
    flips = rng.uniform(size=batch) < 0.5
    views = []
    for i in range(batch):
        view = padded[i, :, tops[i] : tops[i] + height, lefts[i] : lefts[i] + width]
        if flips[i]:
            view = torch.flip(view, dims=(2,))
        views.append(view)
    return torch.stack(views, dim=0)


@torch.no_grad()
def compute_train_feature_stats(network: SplitNetwork, images: torch.Tensor, batch_size: int = 256) -> TrainFeatureStats:
    features = torch.cat(
        [network.forward_features(images[start : start + batch_size], "eval") for start in range(0, len(images), batch_size)]
    )
    mean, var = feature_moments(features.to(torch.float64))
    return TrainFeatureStats(mean=mean, var=var)


def collect_affine_params(network: SplitNetwork) -> ParameterSelector:
    """Scale and shift of every normalization layer in the encoder"""
    return ParameterSelector.resolve(network, "norm_affine_only")


# ---- task objects ---------------------------------------------------------


class AuxiliaryTask:
    """Loss C on a mixed batch plus the parameter subset it updates"""

    def __init__(self, spec: AuxTaskSpec):
        self.spec = spec

    @property
    def param_subset(self) -> str:
        return self.spec.param_subset

    def loss(
        self, network: SplitNetwork, mixed: MixedBatch, test_samples: torch.Tensor, rng: np.random.Generator
    ) -> torch.Tensor:
        raise NotImplementedError


class RotationTask(AuxiliaryTask):
    """Predict which of four rotations was applied to each mixed image"""

    def loss(self, network, mixed, test_samples, rng):
        rotated = rotation_expand(mixed.inputs)
        logits = network.forward_aux(rotated.images, "eval")
        return cross_entropy(logits, rotated.labels)


class EntropyMinimizationTask(AuxiliaryTask):
    """Entropy of main-head predictions under batch-statistics normalization"""

    def loss(self, network, mixed, test_samples, rng):
        return entropy_loss(network.forward_main(mixed.inputs, "batch"))


class ContrastiveAlignmentTask(AuxiliaryTask):
    """Agreement between augmented test views and mixed rows, plus moment alignment"""

    def __init__(self, spec: AuxTaskSpec, feature_stats: Optional[TrainFeatureStats]):
        super().__init__(spec)
        if spec.alignment_weight > 0 and feature_stats is None:
            raise ConfigurationError("contrastive_align needs training feature statistics")
        self.feature_stats = feature_stats

    def loss(self, network, mixed, test_samples, rng):
        tests = torch.as_tensor(test_samples, dtype=mixed.inputs.dtype)
        if tests.dim() == 3:
            tests = tests.unsqueeze(0)
        views = augment_views(tests[torch.from_numpy(mixed.test_ids)], rng)
        return contrastive_alignment_loss(
            network,
            views,
            mixed.inputs,
            self.feature_stats,
            self.spec.weights,
            temperature=self.spec.temperature,
        )


def build_aux_task(spec: AuxTaskSpec, feature_stats: Optional[TrainFeatureStats] = None) -> AuxiliaryTask:
    if spec.kind == "rotation":
        return RotationTask(spec)
    if spec.kind == "entropy_min":
        return EntropyMinimizationTask(spec)
    if spec.kind == "contrastive_align":
        return ContrastiveAlignmentTask(spec, feature_stats)
    raise ConfigurationError(f"Unknown auxiliary task '{spec.kind}'")
