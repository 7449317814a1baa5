"""
Taylor-expansion verification of the mixed test-time loss
L_mt(mu) = L_t(x_t + mu * (x_i - x_t)) expanded at mu = 0, where mu is the weight on
the training partner. The first-order term is the regularizer separating MixTTT
from plain TTT; the remainder should shrink like mu^2.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from scipy.stats import linregress

from ..models.network import LayerSpec, LossClosure, NetworkSpec, SplitNetwork, build_network, grad_input
from ..ttt.aux_tasks import cross_entropy
from ..utils.errors import InputError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_MU_LIST = (0.05, 0.025, 0.0125, 0.00625)
MAX_MU = 0.1
UNDERFLOW = 1e-14
SECANT_STEP = 1e-5
EXPONENT_RANGE = (1.8, 2.2)
RATIO_RANGE = (3.5, 4.5)


def aux_input_loss(y_t, mode: str = "eval") -> LossClosure:
    """L_t(x): auxiliary-head cross-entropy against the label(s) y_t"""
    labels = torch.as_tensor(y_t, dtype=torch.int64).reshape(-1)

    def closure(network: SplitNetwork, x: torch.Tensor) -> torch.Tensor:
        return cross_entropy(network.forward_aux(x, mode), labels)

    return closure


def squared_norm_loss(network: Optional[SplitNetwork], x: torch.Tensor) -> torch.Tensor:
    """Closed-form quadratic L(x) = ||x||^2"""
    return (x**2).sum()


def _loss_value(loss_fn: LossClosure, network, x: torch.Tensor) -> float:
    with torch.no_grad():
        value = float(loss_fn(network, x))
    if not math.isfinite(value):
        raise NumericalError(f"Non-finite loss {value}")
    return value


def _directional_derivative(network, loss_fn: LossClosure, x_t: torch.Tensor, x_i: torch.Tensor) -> float:
    grad = grad_input(network, loss_fn, x_t)
    value = float(((x_i - x_t) * grad).sum())
    if not math.isfinite(value):
        raise NumericalError("Non-finite input gradient")
    return value


def _as_pair(x_t, x_i):
    x_t = torch.as_tensor(x_t, dtype=torch.float64)
    x_i = torch.as_tensor(x_i, dtype=torch.float64)
    if x_t.shape != x_i.shape:
        raise InputError(f"x_t {tuple(x_t.shape)} and x_i {tuple(x_i.shape)} differ in shape")
    return x_t, x_i


def first_order_term(
    network: Optional[SplitNetwork],
    x_t: torch.Tensor,
    y_t,
    x_i: torch.Tensor,
    mu: float,
    loss_fn: Optional[LossClosure] = None,
) -> float:
    """mu * (x_i - x_t)^T grad_x L_t(x_t), computed from the exact input gradient"""
    x_t, x_i = _as_pair(x_t, x_i)
    loss_fn = loss_fn or aux_input_loss(y_t)
    return mu * _directional_derivative(network, loss_fn, x_t, x_i)


def secant_first_order(
    network: Optional[SplitNetwork],
    x_t: torch.Tensor,
    y_t,
    x_i: torch.Tensor,
    mu: float,
    h: float = SECANT_STEP,
    loss_fn: Optional[LossClosure] = None,
) -> float:
    """(L_mt(h) - L_t) / h * mu"""
    x_t, x_i = _as_pair(x_t, x_i)
    loss_fn = loss_fn or aux_input_loss(y_t)
    base = _loss_value(loss_fn, network, x_t)
    shifted = _loss_value(loss_fn, network, torch.lerp(x_t, x_i, h))
    return (shifted - base) / h * mu


def validate_mu_list(mu_list: Sequence[float]) -> List[float]:
    values = [float(mu) for mu in mu_list]
    if not values:
        raise InputError("mu_list is empty")
    for mu in values:
        if not 0.0 < mu <= MAX_MU:
            raise InputError(f"mu values must lie in (0, {MAX_MU}], got {mu}")
    for previous, current in zip(values, values[1:]):
        if not math.isclose(current, previous / 2.0, rel_tol=1e-9):
            raise InputError(f"mu_list must halve at every step, got {previous} then {current}")
    return values


@dataclass
class TaylorReport:
    """Loss values along the mixing direction and the remainder of the first-order expansion"""

    mu_values: List[float]
    loss_test: float
    loss_mixed: List[float]
    first_order: List[float]
    remainder: List[float]
    fitted_exponent: float
    in_fit: List[bool] = field(default_factory=list)

    @property
    def dropped(self) -> List[float]:
        return [mu for mu, used in zip(self.mu_values, self.in_fit) if not used]

    @property
    def remainder_ratios(self) -> List[float]:
        """remainder(mu) / remainder(mu / 2) for consecutive fitted points; about 4 under a mu^2 law"""
        ratios = []
        for k in range(len(self.mu_values) - 1):
            if self.in_fit[k] and self.in_fit[k + 1]:
                ratios.append(self.remainder[k] / self.remainder[k + 1])
        return ratios

    def passes(self, exponent_range=EXPONENT_RANGE, ratio_range=RATIO_RANGE) -> bool:
        if not math.isfinite(self.fitted_exponent):
            return False
        low, high = exponent_range
        if not low <= self.fitted_exponent <= high:
            return False
        return all(ratio_range[0] <= r <= ratio_range[1] for r in self.remainder_ratios)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "mu": self.mu_values,
                "ratio_on_test": [1.0 - mu for mu in self.mu_values],
                "loss_test": self.loss_test,
                "loss_mixed": self.loss_mixed,
                "first_order": self.first_order,
                "remainder": self.remainder,
                "in_fit": self.in_fit,
                "fitted_exponent": self.fitted_exponent,
            }
        )


def taylor_verify(
    network: Optional[SplitNetwork],
    x_t: torch.Tensor,
    y_t,
    x_i: torch.Tensor,
    mu_list: Sequence[float] = DEFAULT_MU_LIST,
    loss_fn: Optional[LossClosure] = None,
) -> TaylorReport:
    """
    Compare L_mt(mu) with its first-order expansion for each mu and fit the
    log-log slope of the remainder.

    Remainders below 1e-14 are at the rounding floor and left out of the fit.
    """
    mu_values = validate_mu_list(mu_list)
    x_t, x_i = _as_pair(x_t, x_i)
    loss_fn = loss_fn or aux_input_loss(y_t)

    loss_test = _loss_value(loss_fn, network, x_t)
    slope = _directional_derivative(network, loss_fn, x_t, x_i)

    loss_mixed, first_order, remainder = [], [], []
    for mu in mu_values:
        mixed = _loss_value(loss_fn, network, torch.lerp(x_t, x_i, mu))
        approx = loss_test + mu * slope
        loss_mixed.append(mixed)
        first_order.append(approx)
        remainder.append(abs(mixed - approx))

    in_fit = [r >= UNDERFLOW for r in remainder]
    for mu, used in zip(mu_values, in_fit):
        if not used:
            logger.warning(f"Remainder at mu={mu} below {UNDERFLOW}; dropped from the fit")

    points = [(math.log(mu), math.log(r)) for mu, r, used in zip(mu_values, remainder, in_fit) if used]
    if len(points) >= 2:
        xs, ys = zip(*points)
        exponent = float(linregress(xs, ys).slope)
    else:
        exponent = float("nan")
        logger.warning("Fewer than two usable remainders; exponent undefined")

    return TaylorReport(
        mu_values=mu_values,
        loss_test=loss_test,
        loss_mixed=loss_mixed,
        first_order=first_order,
        remainder=remainder,
        fitted_exponent=exponent,
        in_fit=in_fit,
    )


def quadratic_taylor_selftest(
    seed: int = 0, shape=(3, 4, 4), mu_list: Sequence[float] = DEFAULT_MU_LIST
) -> TaylorReport:
    """Expansion of ||x||^2: remainder is exactly mu^2 ||x_i - x_t||^2"""
    rng = np.random.default_rng(seed)
    x_t = torch.from_numpy(rng.uniform(0.0, 1.0, size=shape))
    x_i = torch.from_numpy(rng.uniform(0.0, 1.0, size=shape))
    return taylor_verify(None, x_t, None, x_i, mu_list, loss_fn=squared_norm_loss)


# ---- fixed-seed toy configurations --------------------------------------------


@dataclass
class ToyConfiguration:
    network: SplitNetwork
    x_t: torch.Tensor
    y_t: int
    x_i: torch.Tensor


def toy_network_specs() -> List[NetworkSpec]:
    """Small smooth float64 networks used by the verification suite"""
    return [
        NetworkSpec(
            input_shape=(1, 4, 4),
            encoder_layers=[LayerSpec(kind="linear", width=8, norm=False), LayerSpec(kind="linear", width=6, norm=False)],
            main_classes=3,
        ),
        NetworkSpec(
            input_shape=(3, 4, 4),
            encoder_layers=[LayerSpec(kind="conv", width=4), LayerSpec(kind="linear", width=6, norm=False)],
            main_classes=3,
        ),
        NetworkSpec(
            input_shape=(1, 6, 6),
            encoder_layers=[LayerSpec(kind="conv", width=3, stride=2), LayerSpec(kind="conv", width=4)],
            main_classes=3,
            activation="tanh",
        ),
        NetworkSpec(
            input_shape=(2, 4, 4),
            encoder_layers=[LayerSpec(kind="linear", width=10)],
            main_classes=3,
            activation="tanh",
        ),
        NetworkSpec(
            input_shape=(3, 8, 8),
            encoder_layers=[LayerSpec(kind="conv", width=4), LayerSpec(kind="conv", width=8, stride=2)],
            main_classes=3,
        ),
    ]


def toy_configuration(index: int, seed: Optional[int] = None) -> ToyConfiguration:
    """Network, test sample, its rotation-style label and a training partner for toy spec `index`"""
    specs = toy_network_specs()
    spec = specs[index % len(specs)]
    seed = index if seed is None else seed
    network = build_network(spec, seed=seed)
    network.eval()

    rng = np.random.default_rng(1000 + seed)
    x_t = torch.from_numpy(rng.uniform(0.0, 1.0, size=spec.input_shape))
    x_i = torch.from_numpy(rng.uniform(0.0, 1.0, size=spec.input_shape))
    with torch.no_grad():
        y_t = int(network.forward_aux(x_t).argmax(dim=1)[0])
    return ToyConfiguration(network=network, x_t=x_t, y_t=y_t, x_i=x_i)


def toy_taylor_reports(count: int = 5, mu_list: Sequence[float] = DEFAULT_MU_LIST) -> List[TaylorReport]:
    reports = []
    for index in range(count):
        toy = toy_configuration(index)
        reports.append(taylor_verify(toy.network, toy.x_t, toy.y_t, toy.x_i, mu_list))
    return reports
