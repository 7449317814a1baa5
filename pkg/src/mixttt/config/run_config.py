"""
Experiment configuration for MixTTT runs.

A run is described by a flat key=value text file (one key per line, '#' comments,
comma-separated lists). Keys map one-to-one onto RunConfig fields.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..data.corruptions import EXTERNAL_CORRUPTIONS, NATIVE_CORRUPTIONS, CorruptionSpec
from ..models.network import LayerSpec, NetworkSpec
from ..ttt.aux_tasks import AuxTaskSpec
from ..ttt.engine import CIFAR10_PRESET, CIFAR100_PRESET, EpisodeConfig, PretrainConfig, SuiteMethod
from ..ttt.mixup import DEFAULT_PARTNER_BATCH, MixupRatioSpec
from ..utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

METHOD_NAMES = ("baseline", "ttt", "mixttt")
PRESETS = {"cifar10": CIFAR10_PRESET, "cifar100": CIFAR100_PRESET}
LIST_FIELDS = (
    "encoder_widths",
    "encoder_strides",
    "methods",
    "corruptions",
    "severities",
    "drift_seeds",
    "drift_checkpoints",
)


class RunConfig(BaseModel):
    """Every knob of a pretrain / corrupt / ttt / verify run"""

    model_config = ConfigDict(extra="forbid")

    # Paths
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    checkpoint: Optional[str] = None
    corruption_dir: Optional[str] = None
    output_dir: str = "out"
    seed: int = Field(default=0, ge=0)
    train_limit: Optional[int] = Field(default=None, ge=1)
    test_limit: Optional[int] = Field(default=None, ge=1)

    # Network
    main_classes: int = Field(default=10, gt=0)
    activation: Literal["smooth", "tanh", "relu", "identity"] = "smooth"
    dtype: Literal["float32", "float64"] = "float64"
    encoder_widths: List[int] = Field(default_factory=lambda: [16, 32, 64])
    encoder_strides: List[int] = Field(default_factory=lambda: [1, 2, 2])
    encoder_norm: bool = True

    # Pretraining
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=128, ge=1)
    aux_weight: float = Field(default=1.0, ge=0.0)
    lr: float = Field(default=0.05, gt=0.0)
    lr_schedule: Literal["constant", "cosine", "step"] = "cosine"
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    pretrain_aux_task: Literal["rotation", "contrastive"] = "rotation"

    # Test-time training
    task: Literal["rotation", "entropy_min", "contrastive_align"] = "rotation"
    preset: Optional[Literal["cifar10", "cifar100"]] = None
    alpha: Optional[float] = Field(default=None, ge=0.0)
    steps: Optional[int] = Field(default=None, ge=1)
    mode: Literal["single_reset", "batch_online"] = "single_reset"
    partner_batch: int = Field(default=DEFAULT_PARTNER_BATCH, ge=1)
    ratio_low: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    ratio_high: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    ratio_granularity: Literal["per_step", "per_pair"] = "per_pair"
    reset_every: int = Field(default=0, ge=0)
    contrastive_weight: float = Field(default=1.0, ge=0.0)
    alignment_weight: float = Field(default=1.0, ge=0.0)
    temperature: float = Field(default=0.5, gt=0.0)
    methods: List[str] = Field(default_factory=lambda: list(METHOD_NAMES))

    # Corruptions
    corruptions: List[str] = Field(default_factory=lambda: list(NATIVE_CORRUPTIONS))
    severities: List[int] = Field(default_factory=lambda: [5])

    # Verification
    verify_taylor: bool = True
    verify_gradcheck: bool = True
    verify_chain_rule: bool = True
    verify_grad_norm: bool = True
    verify_drift: bool = True
    taylor_configs: int = Field(default=5, ge=1)
    gradcheck_coordinates: int = Field(default=1000, ge=1)
    grad_norm_samples: int = Field(default=20, ge=1)
    verify_corruption: str = "gaussian_noise"
    verify_severity: int = Field(default=5, ge=0, le=5)
    drift_samples: int = Field(default=1000, ge=2)
    drift_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3])
    drift_required_wins: int = Field(default=3, ge=0)
    drift_checkpoints: List[int] = Field(default_factory=lambda: [10, 20, 30])

    @model_validator(mode="before")
    @classmethod
    def _blank_is_unset(cls, values: Any) -> Any:
        if isinstance(values, dict):
            return {k: (None if isinstance(v, str) and v.strip() == "" else v) for k, v in values.items()}
        return values

    @field_validator(*LIST_FIELDS, mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if len(self.encoder_widths) != len(self.encoder_strides):
            raise ValueError("encoder_widths and encoder_strides must have the same length")
        if (self.ratio_low is None) != (self.ratio_high is None):
            raise ValueError("ratio_low and ratio_high must be set together")
        unknown = [m for m in self.methods if m not in METHOD_NAMES]
        if unknown:
            raise ValueError(f"unknown methods {unknown}")
        known = set(NATIVE_CORRUPTIONS) | set(EXTERNAL_CORRUPTIONS)
        unknown = [c for c in self.corruptions + [self.verify_corruption] if c not in known]
        if unknown:
            raise ValueError(f"unknown corruptions {unknown}")
        if any(not 0 <= s <= 5 for s in self.severities):
            raise ValueError("severities must lie in 0..5")
        if any(step < 1 for step in self.drift_checkpoints):
            raise ValueError("drift_checkpoints must be positive")
        return self

    # ---- loading ---------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        unknown = [key for key in values if key not in cls.model_fields]
        if unknown:
            raise ConfigurationError(f"Unknown config key '{unknown[0]}'")
        try:
            return cls(**dict(values))
        except ValidationError as e:
            error = e.errors()[0]
            key = error["loc"][0] if error["loc"] else "config"
            raise ConfigurationError(f"Invalid value for '{key}': {error['msg']}") from e

    @classmethod
    def from_file(
        cls, path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
    ) -> "RunConfig":
        values: Dict[str, Any] = parse_key_values(Path(path).read_text(encoding="utf-8")) if path else {}
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls.from_mapping(values)

    # ---- derived values --------------------------------------------------

    def config_hash(self) -> str:
        """First 16 hex digits of the SHA-256 of the canonical dump (output_dir excluded)"""
        canonical = json.dumps(self.model_dump(exclude={"output_dir"}), sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def require_path(self, key: str) -> Path:
        value = getattr(self, key)
        if value is None:
            raise ConfigurationError(f"'{key}' is required for this command")
        path = Path(value)
        if not path.exists():
            raise ConfigurationError(f"'{key}' points to a missing path: {path}")
        return path

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.output_path / "checkpoint.mttt"

    def network_spec(self, input_shape: Tuple[int, int, int]) -> NetworkSpec:
        layers = [
            LayerSpec(kind="conv", width=width, stride=stride, norm=self.encoder_norm)
            for width, stride in zip(self.encoder_widths, self.encoder_strides)
        ]
        return NetworkSpec(
            input_shape=tuple(input_shape),
            encoder_layers=layers,
            main_classes=self.main_classes,
            aux_classes=4,
            activation=self.activation,
            dtype=self.dtype,
        )

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            aux_weight=self.aux_weight,
            lr=self.lr,
            lr_schedule=self.lr_schedule,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            aux_task=self.pretrain_aux_task,
            temperature=self.temperature,
            seed=self.seed,
        )

    def aux_task_spec(self) -> AuxTaskSpec:
        overrides: Dict[str, Any] = {
            "contrastive_weight": self.contrastive_weight,
            "alignment_weight": self.alignment_weight,
            "temperature": self.temperature,
        }
        default = AuxTaskSpec.for_kind(self.task)
        low = default.ratio_spec.low if self.ratio_low is None else self.ratio_low
        high = default.ratio_spec.high if self.ratio_high is None else self.ratio_high
        overrides["ratio_spec"] = MixupRatioSpec(low=low, high=high, sampling_granularity=self.ratio_granularity)
        return AuxTaskSpec.for_kind(self.task, **overrides)

    def episode_config(self, mix_enabled: bool = True, seed: Optional[int] = None) -> EpisodeConfig:
        preset = PRESETS.get(self.preset or "cifar10", CIFAR10_PRESET)
        return EpisodeConfig(
            alpha=preset["alpha"] if self.alpha is None else self.alpha,
            steps=preset["steps"] if self.steps is None else self.steps,
            task=self.aux_task_spec(),
            mode=self.mode,
            mix_enabled=mix_enabled,
            seed=self.seed if seed is None else seed,
            batch_size=self.partner_batch,
            reset_every=self.reset_every,
        )

    def suite_methods(self) -> List[SuiteMethod]:
        episodes = {
            "baseline": None,
            "ttt": self.episode_config(mix_enabled=False),
            "mixttt": self.episode_config(mix_enabled=True),
        }
        return [SuiteMethod(name, episodes[name]) for name in self.methods]

    def corruption_specs(self) -> List[CorruptionSpec]:
        """Natively generated (kind, severity) combinations in declared order"""
        return [
            CorruptionSpec(kind=kind, severity=severity, seed=self.seed)
            for kind in self.corruptions
            if kind in NATIVE_CORRUPTIONS
            for severity in self.severities
        ]

    def corruption_pairs(self) -> List[Tuple[str, int]]:
        return [(kind, severity) for kind in self.corruptions for severity in self.severities]


def parse_key_values(text: str) -> Dict[str, str]:
    """Flat key=value lines; '#' starts a comment; duplicate keys are an error"""
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {number}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {number}: empty key")
        if key in values:
            raise ConfigurationError(f"line {number}: duplicate key '{key}'")
        values[key] = value
    return values
