"""
Split network for test-time training
Shared feature extractor f, main-task head hm and auxiliary head hs.

The encoder parameters are theta, the main head phi1 and the auxiliary head phi2;
forward_aux is the packaged auxiliary model g = hs o f.
"""

import copy
import logging
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator
from torch import nn
from torch.nn.modules.batchnorm import _BatchNorm

from ..utils.errors import ConfigurationError, FormatError, InputError, NumericalError
from .tensor_io import decode_tensors, encode_tensors, load_tensors, save_tensors

logger = logging.getLogger(__name__)

ActivationName = Literal["smooth", "tanh", "relu", "identity"]
NormMode = Literal["train", "eval", "batch"]
SubsetName = Literal["encoder_full", "norm_affine_only", "heads", "all"]

NORM_MODES = ("train", "eval", "batch")
KERNEL_SIZE = 3

# Encoder features for a batch, shape [batch, feature_dim]
FeatureBatch = torch.Tensor
LossClosure = Callable[["SplitNetwork", torch.Tensor], torch.Tensor]


class LayerSpec(BaseModel):
    """One encoder block: conv (3x3, padding 1) or linear, optional norm and activation"""

    kind: Literal["conv", "linear"]
    width: int = Field(gt=0)
    norm: bool = True
    activation: Optional[ActivationName] = None
    stride: int = Field(default=1, ge=1)
    bias: bool = True


class NetworkSpec(BaseModel):
    """Architecture of the split network"""

    input_shape: Tuple[int, int, int]
    encoder_layers: List[LayerSpec] = Field(min_length=1)
    main_classes: int = Field(gt=0)
    aux_classes: int = Field(default=4, gt=0)
    activation: ActivationName = "smooth"
    dtype: Literal["float32", "float64"] = "float64"

    @model_validator(mode="after")
    def _check_layout(self) -> "NetworkSpec":
        if any(dim <= 0 for dim in self.input_shape):
            raise ValueError(f"input_shape must be positive, got {self.input_shape}")
        seen_linear = False
        for index, layer in enumerate(self.encoder_layers):
            if layer.kind == "linear":
                seen_linear = True
            elif seen_linear:
                raise ValueError(f"encoder layer {index}: conv layer after a linear layer")
            if self.activation == "smooth" and self.layer_activation(layer) == "relu":
                raise ValueError(f"encoder layer {index}: relu inside a smooth network")
        return self

    def layer_activation(self, layer: LayerSpec) -> str:
        return layer.activation or self.activation

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def desk_default(
        cls,
        main_classes: int = 10,
        channels: int = 3,
        image_size: int = 32,
        activation: ActivationName = "smooth",
    ) -> "NetworkSpec":
        """Three conv blocks (16/32/64) with normalization, global pool, linear heads"""
        layers = [
            LayerSpec(kind="conv", width=16, stride=1),
            LayerSpec(kind="conv", width=32, stride=2),
            LayerSpec(kind="conv", width=64, stride=2),
        ]
        return cls(
            input_shape=(channels, image_size, image_size),
            encoder_layers=layers,
            main_classes=main_classes,
            aux_classes=4,
            activation=activation,
        )


def _activation_module(name: str) -> nn.Module:
    if name == "smooth":
        return nn.SiLU()
    if name == "tanh":
        return nn.Tanh()
    if name == "relu":
        return nn.ReLU()
    if name == "identity":
        return nn.Identity()
    raise ConfigurationError(f"Unknown activation '{name}'")


def _conv_output_size(size: int, stride: int) -> int:
    return (size + 2 - KERNEL_SIZE) // stride + 1


def feature_dim(spec: NetworkSpec) -> int:
    """Dimensionality of the encoder output consumed by both heads"""
    channels, height, width = spec.input_shape
    flat: Optional[int] = None
    for layer in spec.encoder_layers:
        if layer.kind == "conv":
            channels = layer.width
        else:
            flat = layer.width
    if flat is not None:
        return flat
    if any(layer.kind == "conv" for layer in spec.encoder_layers):
        return channels
    return channels * height * width


def count_parameters(spec: NetworkSpec) -> int:
    """Closed-form learnable parameter count (weights, biases, norm affine, heads)"""
    channels, height, width = spec.input_shape
    total = 0
    features = channels * height * width
    seen_conv = False
    pooled = False
    for layer in spec.encoder_layers:
        if layer.kind == "conv":
            total += channels * layer.width * KERNEL_SIZE * KERNEL_SIZE
            channels = layer.width
            seen_conv = True
        else:
            if not pooled:
                features = channels if seen_conv else channels * height * width
                pooled = True
            total += features * layer.width
            features = layer.width
        if layer.bias:
            total += layer.width
        if layer.norm:
            total += 2 * layer.width
    dim = feature_dim(spec)
    total += (dim + 1) * spec.main_classes + (dim + 1) * spec.aux_classes
    return total


def count_state_entries(spec: NetworkSpec) -> int:
    """Parameters plus running statistics (mean, var, batch counter) of every norm layer"""
    stats = sum(2 * layer.width + 1 for layer in spec.encoder_layers if layer.norm)
    return count_parameters(spec) + stats


def _build_encoder(spec: NetworkSpec) -> Tuple[List[nn.Module], int]:
    channels, height, width = spec.input_shape
    modules: List[nn.Module] = []
    features = channels * height * width
    seen_conv = False
    flattened = False

    for layer in spec.encoder_layers:
        if layer.kind == "conv":
            modules.append(
                nn.Conv2d(channels, layer.width, KERNEL_SIZE, stride=layer.stride, padding=1, bias=layer.bias)
            )
            if layer.norm:
                modules.append(nn.BatchNorm2d(layer.width))
            channels = layer.width
            height = _conv_output_size(height, layer.stride)
            width = _conv_output_size(width, layer.stride)
            if height <= 0 or width <= 0:
                raise ConfigurationError(f"Input {spec.input_shape} too small for the conv stack")
            seen_conv = True
        else:
            if not flattened:
                if seen_conv:
                    modules.extend([nn.AdaptiveAvgPool2d(1), nn.Flatten()])
                    features = channels
                else:
                    modules.append(nn.Flatten())
                    features = channels * height * width
                flattened = True
            modules.append(nn.Linear(features, layer.width, bias=layer.bias))
            if layer.norm:
                modules.append(nn.BatchNorm1d(layer.width))
            features = layer.width
        modules.append(_activation_module(spec.layer_activation(layer)))

    if not flattened:
        modules.extend([nn.AdaptiveAvgPool2d(1), nn.Flatten()])
        features = channels
    return modules, features


@dataclass(frozen=True)
class ParameterSelector:
    """Named subset of network parameters that a gradient step may touch"""

    names: Tuple[str, ...]

    def parameters(self, network: "SplitNetwork") -> List[nn.Parameter]:
        named = dict(network.named_parameters())
        return [named[name] for name in self.names]

    def size(self, network: "SplitNetwork") -> int:
        return sum(p.numel() for p in self.parameters(network))

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def resolve(
        cls, network: "SplitNetwork", subset: Union[str, "ParameterSelector", Sequence[str]]
    ) -> "ParameterSelector":
        if isinstance(subset, ParameterSelector):
            names: Tuple[str, ...] = subset.names
        elif isinstance(subset, str):
            names = cls._named_subset(network, subset)
        else:
            names = tuple(subset)

        known = dict(network.named_parameters())
        unknown = [name for name in names if name not in known]
        if unknown:
            raise ConfigurationError(f"Unknown parameter names in selector: {unknown}")
        return cls(names=names)

    @staticmethod
    def _named_subset(network: "SplitNetwork", subset: str) -> Tuple[str, ...]:
        all_names = [name for name, _ in network.named_parameters()]
        if subset == "all":
            return tuple(all_names)
        if subset == "encoder_full":
            return tuple(name for name in all_names if name.startswith("encoder."))
        if subset == "heads":
            return tuple(name for name in all_names if not name.startswith("encoder."))
        if subset == "norm_affine_only":
            names = []
            for module_name, module in network.encoder.named_modules():
                if isinstance(module, _BatchNorm) and module.affine:
                    names.extend([f"encoder.{module_name}.weight", f"encoder.{module_name}.bias"])
            if not names:
                raise ConfigurationError("Network has no normalization layers with affine parameters")
            return tuple(names)
        raise ConfigurationError(f"Unknown parameter subset '{subset}'")


@dataclass
class ParameterImage:
    """Exact copy of every parameter and normalization statistic"""

    tensors: "OrderedDict[str, torch.Tensor]"

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.detach().cpu().to(torch.float64).numpy()) for name, t in self.tensors.items())

    def to_bytes(self) -> bytes:
        return encode_tensors(self.to_arrays())

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ParameterImage":
        return cls(OrderedDict((name, torch.from_numpy(np.array(a, dtype=np.float64))) for name, a in arrays.items()))

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ParameterImage":
        return cls.from_arrays(decode_tensors(payload))

    def save(self, path: Union[str, Path]) -> None:
        save_tensors(self.to_arrays(), path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParameterImage":
        return cls.from_arrays(load_tensors(path))


class SplitNetwork(nn.Module):
    """
    Shared encoder with two independent heads.

    A network instance is confined to one thread at a time; parallel episodes work
    on clones (see clone_network).
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        modules, dim = _build_encoder(spec)
        self.feature_dim = dim
        self.encoder = nn.Sequential(*modules)
        self.main_head = nn.Linear(dim, spec.main_classes)
        self.aux_head = nn.Linear(dim, spec.aux_classes)
        self.to(dtype=spec.torch_dtype)

    # ---- parameter views -------------------------------------------------

    @property
    def theta(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.encoder.parameters()).detach()

    @property
    def phi1(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.main_head.parameters()).detach()

    @property
    def phi2(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.aux_head.parameters()).detach()

    @property
    def norm_stats(self) -> Dict[str, torch.Tensor]:
        return {name: buf.detach().clone() for name, buf in self.named_buffers()}

    def norm_layers(self) -> List[_BatchNorm]:
        return [m for m in self.encoder.modules() if isinstance(m, _BatchNorm)]

    # ---- forward passes --------------------------------------------------

    def prepare_input(self, batch: torch.Tensor) -> torch.Tensor:
        if not isinstance(batch, torch.Tensor):
            batch = torch.as_tensor(batch)
        if batch.dim() == len(self.spec.input_shape):
            batch = batch.unsqueeze(0)
        if tuple(batch.shape[1:]) != tuple(self.spec.input_shape) or batch.dim() != 4:
            raise InputError(f"Expected batch of shape [B, {', '.join(map(str, self.spec.input_shape))}], got {tuple(batch.shape)}")
        return batch.to(dtype=self.spec.torch_dtype)

    @contextmanager
    def normalization(self, mode: str) -> Iterator[None]:
        """
        train: batch statistics, running statistics updated
        eval:  running statistics
        batch: batch statistics, running statistics left untouched
        """
        if mode not in NORM_MODES:
            raise InputError(f"Unknown normalization mode '{mode}'")
        was_training = self.training
        norms = self.norm_layers()
        tracked = [m.track_running_stats for m in norms]
        self.train(mode != "eval")
        if mode == "batch":
            for m in norms:
                m.track_running_stats = False
        try:
            yield
        finally:
            for m, flag in zip(norms, tracked):
                m.track_running_stats = flag
            self.train(was_training)

    def forward_features(self, batch: torch.Tensor, mode: str = "eval") -> FeatureBatch:
        x = self.prepare_input(batch)
        with self.normalization(mode):
            return self.encoder(x)

    def forward_aux(self, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
        return self.aux_head(self.forward_features(batch, mode))

    def forward_main(self, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
        return self.main_head(self.forward_features(batch, mode))

    def forward(self, batch: torch.Tensor, mode: str = "eval") -> Tuple[torch.Tensor, torch.Tensor]:
        features = self.forward_features(batch, mode)
        return self.main_head(features), self.aux_head(features)

    # ---- snapshot / restore ----------------------------------------------

    def snapshot(self) -> ParameterImage:
        return ParameterImage(OrderedDict((name, t.detach().clone()) for name, t in self.state_dict().items()))

    def restore(self, image: ParameterImage) -> None:
        current = self.state_dict()
        missing = [name for name in current if name not in image.tensors]
        extra = [name for name in image.tensors if name not in current]
        if missing or extra:
            raise FormatError(f"Parameter image mismatch: missing={missing} unexpected={extra}")
        with torch.no_grad():
            for name, target in current.items():
                source = image.tensors[name]
                if tuple(source.shape) != tuple(target.shape):
                    raise FormatError(f"Shape mismatch for '{name}': {tuple(source.shape)} vs {tuple(target.shape)}")
                target.copy_(source.to(dtype=target.dtype))


def build_network(spec: NetworkSpec, seed: int) -> SplitNetwork:
    """Deterministically initialize a split network; the global torch rng is left untouched"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = SplitNetwork(spec)
    logger.debug(f"Built network with {count_parameters(spec)} parameters (seed={seed})")
    return network


def clone_network(network: SplitNetwork) -> SplitNetwork:
    return copy.deepcopy(network)


def forward_features(network: SplitNetwork, batch: torch.Tensor, mode: str = "eval") -> FeatureBatch:
    return network.forward_features(batch, mode)


def forward_aux(network: SplitNetwork, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    return network.forward_aux(batch, mode)


def forward_main(network: SplitNetwork, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    return network.forward_main(batch, mode)


def _check_loss(loss: torch.Tensor, step: Optional[int] = None) -> None:
    if loss.numel() != 1:
        raise InputError(f"Loss closure must return a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericalError(f"Non-finite loss {loss.item()}", step=step)


def grad_params(
    network: SplitNetwork,
    loss_closure: LossClosure,
    batch: torch.Tensor,
    subset: Union[str, ParameterSelector, Sequence[str]] = "encoder_full",
    step: Optional[int] = None,
) -> torch.Tensor:
    """Flat gradient of the loss restricted to the selected parameters (selector order)"""
    params = ParameterSelector.resolve(network, subset).parameters(network)
    loss = torch.as_tensor(loss_closure(network, batch))
    _check_loss(loss, step)
    if not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params), dtype=network.spec.torch_dtype)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])


def grad_input(
    network: SplitNetwork, loss_closure: LossClosure, batch: torch.Tensor, step: Optional[int] = None
) -> torch.Tensor:
    """Exact gradient of the loss with respect to the input batch, same shape as the batch; step labels errors"""
    x = torch.as_tensor(batch).detach().clone().requires_grad_(True)
    loss = torch.as_tensor(loss_closure(network, x))
    _check_loss(loss, step)
    if not loss.requires_grad:
        return torch.zeros_like(x)
    (grad,) = torch.autograd.grad(loss, x, allow_unused=True)
    return torch.zeros_like(x) if grad is None else grad


def snapshot(network: SplitNetwork) -> ParameterImage:
    return network.snapshot()


def restore(network: SplitNetwork, image: ParameterImage) -> None:
    network.restore(image)
