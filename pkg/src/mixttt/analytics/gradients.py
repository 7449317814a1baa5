"""
Gradient oracles
Central finite differences against autograd, the feature-cut chain rule, and
gradient-norm traces of paired plain / mixed episodes.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from scipy.stats import ttest_rel

from ..models.network import LossClosure, ParameterSelector, SplitNetwork, grad_input, grad_params
from ..ttt.aux_tasks import TrainFeatureStats, cross_entropy
from ..ttt.engine import EpisodeConfig, ttt_episode
from ..ttt.mixup import TrainPartnerPool
from ..utils.errors import ConfigurationError, InputError, NumericalError
from .taylor import aux_input_loss

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
RELATIVE_FLOOR = 1e-5
GRADCHECK_TOLERANCE = 1e-4


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def joint_loss(y_aux, y_main, mode: str = "eval") -> LossClosure:
    """Auxiliary plus main-head cross-entropy, so every parameter carries gradient"""
    aux_labels = torch.as_tensor(y_aux, dtype=torch.int64).reshape(-1)
    main_labels = torch.as_tensor(y_main, dtype=torch.int64).reshape(-1)

    def closure(network: SplitNetwork, x: torch.Tensor) -> torch.Tensor:
        main_logits, aux_logits = network(x, mode)
        return cross_entropy(aux_logits, aux_labels) + cross_entropy(main_logits, main_labels)

    return closure


@torch.no_grad()
def _evaluate(network: SplitNetwork, loss_fn: LossClosure, batch: torch.Tensor) -> float:
    return float(loss_fn(network, batch))


def gradient_check(
    network: SplitNetwork,
    loss_fn: LossClosure,
    batch: torch.Tensor,
    subset: Union[str, ParameterSelector, Sequence[str]] = "all",
    coordinates: Optional[int] = None,
    include_inputs: bool = True,
    h: float = FD_STEP,
    seed: int = 0,
) -> pd.DataFrame:
    """
    Compare analytic gradients with central differences coordinate by coordinate.

    coordinates caps the number of sampled parameter coordinates (all when None);
    every input coordinate is checked when include_inputs is set.

    Returns:
        DataFrame with columns kind, name, index, analytic, numeric, relative_error
    """
    rng = np.random.default_rng(seed)
    selector = ParameterSelector.resolve(network, subset)
    params = selector.parameters(network)
    analytic = grad_params(network, loss_fn, batch, selector).detach().numpy()

    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    count = total if coordinates is None else min(coordinates, total)
    chosen = np.sort(rng.choice(total, size=count, replace=False))

    rows = []
    for flat in chosen:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[which])
        view = params[which].data.view(-1)
        original = view[local].item()
        view[local] = original + h
        plus = _evaluate(network, loss_fn, batch)
        view[local] = original - h
        minus = _evaluate(network, loss_fn, batch)
        view[local] = original
        numeric = (plus - minus) / (2.0 * h)
        rows.append(
            {
                "kind": "param",
                "name": selector.names[which],
                "index": local,
                "analytic": float(analytic[flat]),
                "numeric": numeric,
                "relative_error": relative_error(float(analytic[flat]), numeric),
            }
        )

    if include_inputs:
        x = torch.as_tensor(batch, dtype=torch.float64).clone()
        input_grad = grad_input(network, loss_fn, x).reshape(-1).numpy()
        flat_x = x.view(-1)
        for index in range(flat_x.numel()):
            original = flat_x[index].item()
            flat_x[index] = original + h
            plus = _evaluate(network, loss_fn, x)
            flat_x[index] = original - h
            minus = _evaluate(network, loss_fn, x)
            flat_x[index] = original
            numeric = (plus - minus) / (2.0 * h)
            rows.append(
                {
                    "kind": "input",
                    "name": "x",
                    "index": index,
                    "analytic": float(input_grad[index]),
                    "numeric": numeric,
                    "relative_error": relative_error(float(input_grad[index]), numeric),
                }
            )

    frame = pd.DataFrame(rows, columns=["kind", "name", "index", "analytic", "numeric", "relative_error"])
    if not np.all(np.isfinite(frame[["analytic", "numeric"]].to_numpy())):
        raise NumericalError("Non-finite gradient in gradient check")
    return frame


def encoder_jacobian(network: SplitNetwork, x: torch.Tensor, analytic: bool = False, h: float = FD_STEP) -> torch.Tensor:
    """d features / d input for one sample, shape [feature_dim, input numel]"""
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise InputError("Jacobian is computed for a single sample")
        x = x[0]

    def features(flat: torch.Tensor) -> torch.Tensor:
        return network.forward_features(flat.reshape(x.shape), "eval")[0]

    flat = x.reshape(-1)
    if analytic:
        return torch.autograd.functional.jacobian(features, flat)

    columns = []
    with torch.no_grad():
        for index in range(flat.numel()):
            step = torch.zeros_like(flat)
            step[index] = h
            columns.append((features(flat + step) - features(flat - step)) / (2.0 * h))
    return torch.stack(columns, dim=1)


def chain_rule_check(
    network: SplitNetwork, x_t: torch.Tensor, y_t, analytic_jacobian: bool = False, h: float = FD_STEP
) -> float:
    """
    ||grad_x L_t - J^T dL_t/dfeat|| / ||grad_x L_t|| with J the encoder input-Jacobian.

    dL_t/dfeat is taken at the feature cut; J is a finite-difference Jacobian unless
    analytic_jacobian is set.
    """
    x_t = torch.as_tensor(x_t, dtype=torch.float64)
    labels = torch.as_tensor(y_t, dtype=torch.int64).reshape(-1)

    features = network.forward_features(x_t, "eval").detach().requires_grad_(True)
    loss = cross_entropy(network.aux_head(features), labels)
    (feature_grad,) = torch.autograd.grad(loss, features)

    jacobian = encoder_jacobian(network, x_t, analytic=analytic_jacobian, h=h)
    composed = jacobian.t() @ feature_grad[0]
    direct = grad_input(network, aux_input_loss(labels), x_t).reshape(-1)

    scale = float(direct.norm())
    residual = float((direct - composed).norm())
    if not math.isfinite(residual):
        raise NumericalError("Non-finite chain-rule residual")
    return residual / scale if scale > 0 else residual


# ---- gradient-norm traces -------------------------------------------------


@dataclass
class GradNormTrace:
    """Per-step ||grad_theta L_aux|| for one paired (plain, mixed) run"""

    sample: int
    plain: List[float]
    mixed: List[float]

    def __post_init__(self) -> None:
        if len(self.plain) != len(self.mixed):
            raise InputError("paired traces must have equal length")


@dataclass
class GradNormComparison:
    traces: List[GradNormTrace] = field(default_factory=list)
    mean_plain: float = float("nan")
    mean_mixed: float = float("nan")
    statistic: float = float("nan")
    p_value: float = float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.mean_mixed <= self.mean_plain)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"sample": trace.sample, "step": step + 1, "plain_grad_norm": plain, "mixed_grad_norm": mixed}
            for trace in self.traces
            for step, (plain, mixed) in enumerate(zip(trace.plain, trace.mixed))
        ]
        return pd.DataFrame(rows, columns=["sample", "step", "plain_grad_norm", "mixed_grad_norm"])

    def summary(self) -> dict:
        return {
            "mean_plain": self.mean_plain,
            "mean_mixed": self.mean_mixed,
            "t_statistic": self.statistic,
            "p_value": self.p_value,
            "n_samples": len(self.traces),
            "passed": self.passed,
        }


def _check_pair(plain: EpisodeConfig, mixed: EpisodeConfig) -> None:
    if plain.model_dump(exclude={"mix_enabled"}) != mixed.model_dump(exclude={"mix_enabled"}):
        raise ConfigurationError("grad_norm_compare configs may differ only in mix_enabled")


def grad_norm_compare(
    network: SplitNetwork,
    test_images: torch.Tensor,
    plain: EpisodeConfig,
    mixed: EpisodeConfig,
    pool: Optional[TrainPartnerPool] = None,
    feature_stats: Optional[TrainFeatureStats] = None,
) -> GradNormComparison:
    """Paired episodes per test sample with a one-sided paired t-test (mixed < plain)"""
    _check_pair(plain, mixed)
    plain = plain.model_copy(update={"mode": "single_reset"})
    mixed = mixed.model_copy(update={"mode": "single_reset"})

    traces = []
    for index in range(len(test_images)):
        first = ttt_episode(network, test_images[index], plain, pool, feature_stats, episode_index=index)
        second = ttt_episode(network, test_images[index], mixed, pool, feature_stats, episode_index=index)
        traces.append(GradNormTrace(sample=index, plain=first.grad_norms.tolist(), mixed=second.grad_norms.tolist()))

    if not traces:
        raise InputError("grad_norm_compare needs at least one test sample")
    plain_means = np.array([np.mean(t.plain) for t in traces])
    mixed_means = np.array([np.mean(t.mixed) for t in traces])

    comparison = GradNormComparison(
        traces=traces, mean_plain=float(plain_means.mean()), mean_mixed=float(mixed_means.mean())
    )
    differences = mixed_means - plain_means
    if np.all(differences == 0):
        comparison.statistic, comparison.p_value = 0.0, 1.0
    elif len(traces) >= 2:
        result = ttest_rel(mixed_means, plain_means, alternative="less")
        comparison.statistic, comparison.p_value = float(result.statistic), float(result.pvalue)

    logger.info(
        f"📉 Gradient norms over {len(traces)} samples: plain={comparison.mean_plain:.6f} "
        f"mixed={comparison.mean_mixed:.6f} p={comparison.p_value:.4g}"
    )
    return comparison
