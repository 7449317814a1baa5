"""
Phase orchestration for test-time training
Multi-task pretraining, the (Mix)TTT episode loop, inference and corruption suites.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field

from ..data.datasets import Dataset
from ..models.network import ParameterImage, ParameterSelector, SplitNetwork, clone_network
from ..models.tensor_io import load_tensors, save_tensors
from ..utils.errors import ConfigurationError, EpisodeError, FormatError, InputError, NumericalError
from .aux_tasks import (
    AuxTaskSpec,
    TrainFeatureStats,
    augment_views,
    build_aux_task,
    cross_entropy,
    nt_xent_loss,
    rotation_expand,
)
from .mixup import TrainPartnerPool, build_mixed_batch, build_plain_batch

logger = logging.getLogger(__name__)

FEATURE_STATS_PREFIX = "feature_stats."
INFERENCE_CHUNK = 256


class PretrainConfig(BaseModel):
    """Joint training of main and auxiliary heads: L_main + aux_weight * L_aux"""

    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=128, ge=1)
    aux_weight: float = Field(default=1.0, ge=0.0)
    lr: float = Field(default=0.05, gt=0.0)
    lr_schedule: Literal["constant", "cosine", "step"] = "cosine"
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    aux_task: Literal["rotation", "contrastive"] = "rotation"
    temperature: float = Field(default=0.5, gt=0.0)
    seed: int = Field(default=0, ge=0)


class EpisodeConfig(BaseModel):
    """One test-time adaptation run: plain SGD with rate alpha for a fixed number of steps"""

    alpha: float = Field(default=1e-3, ge=0.0)
    steps: int = Field(default=10, ge=1)
    task: AuxTaskSpec = Field(default_factory=lambda: AuxTaskSpec.for_kind("rotation"))
    mode: Literal["single_reset", "batch_online"] = "single_reset"
    mix_enabled: bool = True
    seed: int = Field(default=0, ge=0)
    batch_size: int = Field(default=32, ge=1)
    reset_every: int = Field(default=0, ge=0)
    record_features: bool = False


CIFAR10_PRESET = {"alpha": 1e-3, "steps": 10}
CIFAR100_PRESET = {"alpha": 1e-4, "steps": 5}


@dataclass
class StepRecord:
    step: int
    aux_loss: float
    grad_norm_theta: float
    features: Optional[np.ndarray] = None


@dataclass
class EpisodeResult:
    """Predictions after adaptation and the per-step trace"""

    predictions: np.ndarray
    trace: List[StepRecord]
    initial_features: Optional[np.ndarray] = None

    @property
    def prediction(self) -> int:
        return int(self.predictions[0])

    @property
    def aux_losses(self) -> np.ndarray:
        return np.array([record.aux_loss for record in self.trace])

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([record.grad_norm_theta for record in self.trace])

    def features_at(self, step: int) -> np.ndarray:
        """Recorded test-sample features after `step` updates (0 = before adaptation)"""
        if step == 0:
            if self.initial_features is None:
                raise InputError("Episode was run without record_features")
            return self.initial_features
        record = self.trace[step - 1]
        if record.features is None:
            raise InputError("Episode was run without record_features")
        return record.features


@dataclass
class PretrainResult:
    network: SplitNetwork
    metrics: pd.DataFrame = field(default_factory=pd.DataFrame)


# ---- pretraining ----------------------------------------------------------


def _scheduler(optimizer: torch.optim.Optimizer, config: PretrainConfig):
    if config.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    if config.lr_schedule == "step":
        return torch.optim.lr_scheduler.StepLR(optimizer, step_size=max(1, config.epochs // 3), gamma=0.1)
    return None


def _pretrain_aux_loss(
    network: SplitNetwork, images: torch.Tensor, config: PretrainConfig, rng: np.random.Generator
) -> torch.Tensor:
    if config.aux_task == "rotation":
        rotated = rotation_expand(images)
        return cross_entropy(network.forward_aux(rotated.images, "train"), rotated.labels)
    first = network.aux_head(network.forward_features(augment_views(images, rng), "train"))
    second = network.aux_head(network.forward_features(augment_views(images, rng), "train"))
    return nt_xent_loss(first, second, config.temperature)


@torch.no_grad()
def evaluate_accuracy(network: SplitNetwork, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    predictions = predict_baseline(network, dataset.images)
    return float(np.mean(predictions == dataset.labels.numpy()))


def pretrain(
    network: SplitNetwork,
    train_set: Dataset,
    config: PretrainConfig,
    eval_set: Optional[Dataset] = None,
) -> PretrainResult:
    """Minimize L_main + aux_weight * L_aux jointly; one metrics row per epoch"""
    if len(train_set) == 0:
        raise InputError("Pretraining needs a non-empty labeled training set")
    if train_set.labels.max() >= network.spec.main_classes:
        raise InputError(f"labels exceed main_classes={network.spec.main_classes}")

    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.SGD(
        network.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    scheduler = _scheduler(optimizer, config)
    has_norm = bool(network.norm_layers())
    clean_set = eval_set if eval_set is not None else train_set
    n = len(train_set)
    rows = []

    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(n, generator=generator)
        main_total, aux_total, correct, seen = 0.0, 0.0, 0, 0
        lr = optimizer.param_groups[0]["lr"]

        for start in range(0, n, config.batch_size):
            index = order[start : start + config.batch_size]
            if has_norm and len(index) < 2:
                continue
            images = train_set.images[index]
            labels = train_set.labels[index]

            network.train()
            main_logits = network.forward_main(images, "train")
            main_loss = F.cross_entropy(main_logits, labels)
            loss = main_loss
            aux_value = 0.0
            if config.aux_weight > 0:
                aux_loss = _pretrain_aux_loss(network, images, config, rng)
                loss = loss + config.aux_weight * aux_loss
                aux_value = float(aux_loss.detach())
            if not torch.isfinite(loss):
                raise NumericalError("Pretraining diverged: non-finite loss", epoch=epoch)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            batch = len(index)
            main_total += float(main_loss.detach()) * batch
            aux_total += aux_value * batch
            correct += int((main_logits.detach().argmax(dim=1) == labels).sum())
            seen += batch

        if scheduler is not None:
            scheduler.step()
        network.eval()
        row = {
            "epoch": epoch,
            "lr": lr,
            "main_loss": main_total / max(seen, 1),
            "aux_loss": aux_total / max(seen, 1),
            "train_accuracy": correct / max(seen, 1),
            "clean_accuracy": evaluate_accuracy(network, clean_set),
        }
        rows.append(row)
        logger.info(
            f"📈 Epoch {epoch}/{config.epochs}: main_loss={row['main_loss']:.4f} "
            f"aux_loss={row['aux_loss']:.4f} clean_acc={row['clean_accuracy']:.4f}"
        )

    return PretrainResult(network=network, metrics=pd.DataFrame(rows))


# ---- inference ------------------------------------------------------------


def argmax_lowest(logits) -> np.ndarray:
    """Row-wise argmax; exact ties go to the lowest class index"""
    values = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    if values.ndim == 1:
        values = values[None, :]
    return np.argmax(values, axis=1)


@torch.no_grad()
def infer(network: SplitNetwork, test_inputs: torch.Tensor) -> np.ndarray:
    """Main-task class per test sample, eval-mode normalization"""
    return argmax_lowest(network.forward_main(test_inputs, "eval"))


@torch.no_grad()
def predict_baseline(network: SplitNetwork, images: torch.Tensor) -> np.ndarray:
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64)
    chunks = [infer(network, images[start : start + INFERENCE_CHUNK]) for start in range(0, len(images), INFERENCE_CHUNK)]
    return np.concatenate(chunks)


# ---- episodes -------------------------------------------------------------


def episode_streams(seed: int, episode_index: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent (mixing, augmentation) rng streams for one episode"""
    mix_seq, aug_seq = np.random.SeedSequence([seed, episode_index]).spawn(2)
    return np.random.default_rng(mix_seq), np.random.default_rng(aug_seq)


@torch.no_grad()
def _test_features(network: SplitNetwork, tests: torch.Tensor) -> np.ndarray:
    return network.forward_features(tests, "eval").detach().to(torch.float64).numpy().copy()


def ttt_episode(
    network: SplitNetwork,
    test_inputs: torch.Tensor,
    config: EpisodeConfig,
    pool: Optional[TrainPartnerPool] = None,
    feature_stats: Optional[TrainFeatureStats] = None,
    episode_index: int = 0,
) -> EpisodeResult:
    """
    Adapt on the test input(s), then predict.

    Each step builds a mixed (or plain) batch, evaluates the auxiliary loss and takes
    a gradient step of size alpha on the task's parameter subset. In single_reset
    mode the network is restored afterwards, also when the episode fails.
    """
    if config.mix_enabled and pool is None:
        raise ConfigurationError("mix_enabled episodes need a training partner pool")

    tests = torch.as_tensor(test_inputs, dtype=torch.float64)
    if tests.dim() == 3:
        tests = tests.unsqueeze(0)
    network.prepare_input(tests)

    task = build_aux_task(config.task, feature_stats)
    params = ParameterSelector.resolve(network, task.param_subset).parameters(network)
    batch_size = config.batch_size if config.mode == "single_reset" else int(tests.shape[0])
    image = network.snapshot() if config.mode == "single_reset" else None
    mix_rng, aug_rng = episode_streams(config.seed, episode_index)

    trace: List[StepRecord] = []
    try:
        initial = _test_features(network, tests) if config.record_features else None
        for step in range(1, config.steps + 1):
            if config.mix_enabled:
                batch = build_mixed_batch(tests, pool, config.task.ratio_spec, batch_size, mix_rng)
            else:
                batch = build_plain_batch(tests, batch_size)

            loss = task.loss(network, batch, tests, aug_rng)
            if not torch.isfinite(loss):
                raise EpisodeError(f"Non-finite auxiliary loss {float(loss.detach())}", step=step, trace=trace)

            grads = torch.autograd.grad(loss, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
            grad_norm = math.sqrt(sum(float((g.detach().to(torch.float64) ** 2).sum()) for g in grads))
            if not math.isfinite(grad_norm):
                raise EpisodeError("Non-finite gradient norm", step=step, trace=trace)

            with torch.no_grad():
                for p, g in zip(params, grads):
                    p.add_(g, alpha=-config.alpha)

            features = _test_features(network, tests) if config.record_features else None
            trace.append(StepRecord(step, float(loss.detach()), grad_norm, features))
            logger.debug(f"episode {episode_index} step {step}: loss={trace[-1].aux_loss:.6f} grad_norm={grad_norm:.6f}")

        predictions = infer(network, tests)
    finally:
        if image is not None:
            network.restore(image)

    return EpisodeResult(predictions=predictions, trace=trace, initial_features=initial)


def online_batches(count: int, batch_size: int) -> List[Tuple[int, int]]:
    """(start, stop) bounds of consecutive test batches; a one-row tail joins the previous batch"""
    bounds = [(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]
    if batch_size > 1 and len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], count)]
    return bounds


def run_online(
    network: SplitNetwork,
    images: torch.Tensor,
    config: EpisodeConfig,
    pool: Optional[TrainPartnerPool] = None,
    feature_stats: Optional[TrainFeatureStats] = None,
) -> np.ndarray:
    """Adapt sequentially over test batches of config.batch_size; reset every reset_every batches"""
    online = config.model_copy(update={"mode": "batch_online"})
    start_image = network.snapshot()
    predictions = []
    for batch_index, (start, stop) in enumerate(online_batches(len(images), config.batch_size)):
        result = ttt_episode(network, images[start:stop], online, pool, feature_stats, episode_index=batch_index)
        predictions.append(result.predictions)
        if config.reset_every and (batch_index + 1) % config.reset_every == 0:
            network.restore(start_image)
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


def run_episodes(
    network: SplitNetwork,
    images: torch.Tensor,
    config: EpisodeConfig,
    pool: Optional[TrainPartnerPool] = None,
    feature_stats: Optional[TrainFeatureStats] = None,
    threads: int = 1,
) -> List[EpisodeResult]:
    """
    Single-sample episodes over every image, ordered by sample index.

    Workers operate on their own network clones; results do not depend on the
    number of threads.
    """
    single = config.model_copy(update={"mode": "single_reset"})
    count = len(images)
    if count == 0:
        return []
    workers = max(1, min(threads, count))
    chunks = [list(chunk) for chunk in np.array_split(np.arange(count), workers)]

    def work(indices: Sequence[int]) -> List[Tuple[int, EpisodeResult]]:
        local = clone_network(network)
        return [(int(i), ttt_episode(local, images[int(i)], single, pool, feature_stats, episode_index=int(i))) for i in indices]

    if workers == 1:
        pairs = work(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            pairs = [pair for chunk_pairs in executor.map(work, chunks) for pair in chunk_pairs]

    results: List[Optional[EpisodeResult]] = [None] * count
    for index, result in pairs:
        results[index] = result
    return results  # type: ignore[return-value]


# ---- suites ---------------------------------------------------------------


@dataclass(frozen=True)
class SuiteMethod:
    """A column of the error table; episode None means no test-time training"""

    name: str
    episode: Optional[EpisodeConfig] = None


def default_methods(episode: EpisodeConfig) -> List[SuiteMethod]:
    return [
        SuiteMethod("baseline"),
        SuiteMethod("ttt", episode.model_copy(update={"mix_enabled": False})),
        SuiteMethod("mixttt", episode.model_copy(update={"mix_enabled": True})),
    ]


def predict_with_method(
    network: SplitNetwork,
    dataset: Dataset,
    method: SuiteMethod,
    pool: Optional[TrainPartnerPool] = None,
    feature_stats: Optional[TrainFeatureStats] = None,
    threads: int = 1,
) -> np.ndarray:
    if method.episode is None:
        return predict_baseline(network, dataset.images)
    if method.episode.mode == "batch_online":
        return run_online(clone_network(network), dataset.images, method.episode, pool, feature_stats)
    results = run_episodes(network, dataset.images, method.episode, pool, feature_stats, threads)
    return np.array([r.prediction for r in results], dtype=np.int64)


def error_rate_percent(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(predictions) != len(labels):
        raise InputError(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        return float("nan")
    return float(100.0 * np.mean(np.asarray(predictions) != np.asarray(labels)))


def run_suite(
    network: SplitNetwork,
    test_sets: Mapping[Tuple[str, int], Dataset],
    methods: Sequence[SuiteMethod],
    pool: Optional[TrainPartnerPool] = None,
    feature_stats: Optional[TrainFeatureStats] = None,
    threads: int = 1,
    seed: int = 0,
) -> pd.DataFrame:
    """Error rate per (corruption, severity) and method, in declared order"""
    if not methods:
        raise ConfigurationError("run_suite needs at least one method")
    rows = []
    for (corruption, severity), dataset in test_sets.items():
        if len(dataset.labels) != len(dataset.images):
            raise InputError(f"{corruption}: label/sample count mismatch")
        for method in methods:
            predictions = predict_with_method(network, dataset, method, pool, feature_stats, threads)
            error = error_rate_percent(predictions, dataset.labels.numpy())
            rows.append(
                {
                    "corruption": corruption,
                    "severity": severity,
                    "method": method.name,
                    "error_rate_percent": error,
                    "n_samples": len(dataset),
                    "seed": method.episode.seed if method.episode is not None else seed,
                }
            )
            logger.info(f"🧪 {corruption} s{severity} {method.name}: error={error:.2f}%")
    return pd.DataFrame(rows, columns=["corruption", "severity", "method", "error_rate_percent", "n_samples", "seed"])


def summarize_error_table(errors: pd.DataFrame) -> pd.DataFrame:
    """Method x corruption pivot (mean over severities and seeds) with an avg column"""
    corruptions = list(dict.fromkeys(errors["corruption"]))
    methods = list(dict.fromkeys(errors["method"]))
    pivot = errors.pivot_table(index="method", columns="corruption", values="error_rate_percent", aggfunc="mean")
    pivot = pivot.reindex(index=methods, columns=corruptions)
    pivot["avg"] = pivot[corruptions].mean(axis=1)
    pivot.columns.name = None
    return pivot.reset_index()


# ---- checkpoints ----------------------------------------------------------


def save_checkpoint(
    network: SplitNetwork, path: Union[str, Path], feature_stats: Optional[TrainFeatureStats] = None
) -> None:
    arrays: Dict[str, np.ndarray] = dict(network.snapshot().to_arrays())
    if feature_stats is not None:
        arrays.update(feature_stats.to_arrays(FEATURE_STATS_PREFIX))
    save_tensors(arrays, path)


def load_checkpoint(network: SplitNetwork, path: Union[str, Path]) -> Optional[TrainFeatureStats]:
    """Restore network tensors from a checkpoint; returns the stored feature statistics if any"""
    arrays = load_tensors(path)
    stats_arrays = {k: v for k, v in arrays.items() if k.startswith(FEATURE_STATS_PREFIX)}
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith(FEATURE_STATS_PREFIX)}
    network.restore(ParameterImage.from_arrays(model_arrays))
    if not stats_arrays:
        return None
    try:
        return TrainFeatureStats.from_arrays(stats_arrays, FEATURE_STATS_PREFIX)
    except KeyError as e:
        raise FormatError(f"{path}: incomplete feature statistics ({e})") from e
