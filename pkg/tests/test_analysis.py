"""Tests for the Taylor, gradient and drift oracles."""

import math

import numpy as np
import pytest
import torch

from mixttt.analytics.drift import drift_analysis, drift_delta, drift_experiment, is_degenerate, project_2d
from mixttt.analytics.gradients import (
    GRADCHECK_TOLERANCE,
    chain_rule_check,
    encoder_jacobian,
    grad_norm_compare,
    gradient_check,
    joint_loss,
    relative_error,
)
from mixttt.analytics.taylor import (
    first_order_term,
    quadratic_taylor_selftest,
    secant_first_order,
    squared_norm_loss,
    taylor_verify,
    toy_configuration,
    toy_taylor_reports,
    validate_mu_list,
)
from mixttt.models.network import LayerSpec, NetworkSpec, build_network
from mixttt.ttt.aux_tasks import AuxTaskSpec
from mixttt.ttt.engine import EpisodeConfig
from mixttt.ttt.mixup import MixupRatioSpec
from mixttt.utils.errors import ConfigurationError, InputError

# ---- Taylor expansion -----------------------------------------------------


def test_first_order_vanishes_without_direction():
    x = torch.rand(2, 3, 3, dtype=torch.float64)
    assert first_order_term(None, x, None, x, 0.05, loss_fn=squared_norm_loss) == 0.0
    y = torch.rand(2, 3, 3, dtype=torch.float64)
    assert first_order_term(None, x, None, y, 0.0, loss_fn=squared_norm_loss) == 0.0


def test_first_order_of_quadratic():
    x_t = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
    x_i = torch.ones(1, 2, 2, dtype=torch.float64)
    # mu * (x_i - x_t) . 2 x_t = 0.1 * 4 * 0.5 * 1.0
    assert first_order_term(None, x_t, None, x_i, 0.1, loss_fn=squared_norm_loss) == pytest.approx(0.2, rel=1e-12)


def test_secant_agrees_with_autograd():
    toy = toy_configuration(1)
    exact = first_order_term(toy.network, toy.x_t, toy.y_t, toy.x_i, 0.05)
    approx = secant_first_order(toy.network, toy.x_t, toy.y_t, toy.x_i, 0.05)
    assert approx == pytest.approx(exact, rel=1e-3, abs=1e-6)


def test_secant_agrees_over_many_triples():
    for seed in range(100):
        toy = toy_configuration(seed % 5, seed=seed)
        exact = first_order_term(toy.network, toy.x_t, toy.y_t, toy.x_i, 0.05)
        approx = secant_first_order(toy.network, toy.x_t, toy.y_t, toy.x_i, 0.05, h=1e-6)
        assert approx == pytest.approx(exact, rel=1e-3, abs=1e-9)


def test_quadratic_remainder_is_exact():
    report = quadratic_taylor_selftest(seed=3)
    rng = np.random.default_rng(3)
    x_t = rng.uniform(0.0, 1.0, size=(3, 4, 4))
    x_i = rng.uniform(0.0, 1.0, size=(3, 4, 4))
    distance = float(((x_i - x_t) ** 2).sum())
    for mu, remainder in zip(report.mu_values, report.remainder):
        assert remainder == pytest.approx(mu**2 * distance, rel=1e-8)
    assert report.fitted_exponent == pytest.approx(2.0, abs=1e-6)
    assert all(ratio == pytest.approx(4.0, rel=1e-6) for ratio in report.remainder_ratios)
    assert report.passes()


def test_report_frame_columns():
    frame = quadratic_taylor_selftest().to_frame()
    assert list(frame["mu"]) == [0.05, 0.025, 0.0125, 0.00625]
    assert frame["ratio_on_test"].iloc[0] == pytest.approx(0.95)
    assert frame["in_fit"].all()


def test_toy_networks_show_second_order_remainder():
    for report in toy_taylor_reports(5):
        low, high = 1.8, 2.2
        assert low <= report.fitted_exponent <= high
        assert report.passes()


def test_identical_partner_drops_every_point():
    toy = toy_configuration(0)
    report = taylor_verify(toy.network, toy.x_t, toy.y_t, toy.x_t)
    assert report.dropped == report.mu_values
    assert math.isnan(report.fitted_exponent)
    assert not report.passes()


@pytest.mark.parametrize("mu_list", [[], [0.2, 0.1], [0.05, 0.02], [0.0], [0.05, 0.025, 0.0]])
def test_invalid_mu_lists(mu_list):
    with pytest.raises(InputError):
        validate_mu_list(mu_list)


def test_shape_mismatch_rejected():
    with pytest.raises(InputError):
        taylor_verify(None, torch.zeros(2, 2), None, torch.zeros(2, 3), loss_fn=squared_norm_loss)


# ---- gradients ------------------------------------------------------------


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-8, 0.0) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_gradient_check_on_tiny_network(tiny_network, test_set):
    batch = test_set.images[:2]
    frame = gradient_check(tiny_network, joint_loss([0, 1], [1, 2]), batch, coordinates=60, seed=1)
    assert list(frame.columns) == ["kind", "name", "index", "analytic", "numeric", "relative_error"]
    assert (frame["kind"] == "param").sum() == 60
    assert (frame["kind"] == "input").sum() == batch.numel()
    assert frame["relative_error"].max() <= GRADCHECK_TOLERANCE


def test_gradient_check_restricted_to_heads(tiny_network, test_set):
    frame = gradient_check(tiny_network, joint_loss([3], [0]), test_set.images[:1], subset="heads", include_inputs=False)
    assert set(frame["name"]) <= {"main_head.weight", "main_head.bias", "aux_head.weight", "aux_head.bias"}
    assert len(frame) == 4 * (tiny_network.feature_dim + 1) * 2
    assert frame["relative_error"].max() <= GRADCHECK_TOLERANCE


def test_gradient_check_leaves_network_unchanged(tiny_network, test_set):
    before = tiny_network.snapshot().to_bytes()
    gradient_check(tiny_network, joint_loss([0], [0]), test_set.images[:1], coordinates=10, include_inputs=False)
    assert tiny_network.snapshot().to_bytes() == before


def test_chain_rule_with_finite_difference_jacobian(tiny_network, test_set):
    assert chain_rule_check(tiny_network, test_set.images[:1], [2]) <= 1e-3


def test_chain_rule_with_analytic_jacobian(tiny_network, test_set):
    assert chain_rule_check(tiny_network, test_set.images[:1], [1], analytic_jacobian=True) <= 1e-10


def test_chain_rule_is_exact_for_linear_encoder():
    spec = NetworkSpec(
        input_shape=(1, 2, 2),
        encoder_layers=[LayerSpec(kind="linear", width=3, norm=False)],
        main_classes=2,
        activation="identity",
    )
    network = build_network(spec, seed=0)
    x_t = torch.rand(1, 1, 2, 2, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    assert chain_rule_check(network, x_t, [1], analytic_jacobian=True) <= 1e-12


def test_jacobian_shape(tiny_network, test_set):
    jacobian = encoder_jacobian(tiny_network, test_set.images[0], analytic=True)
    assert jacobian.shape == (tiny_network.feature_dim, test_set.images[0].numel())


def pair(alpha=1e-2, task=None, steps=3):
    task = task or AuxTaskSpec.for_kind("rotation")
    mixed = EpisodeConfig(alpha=alpha, steps=steps, task=task, batch_size=4, mix_enabled=True)
    return mixed.model_copy(update={"mix_enabled": False}), mixed


def test_zero_alpha_plain_trace_is_constant(tiny_network, test_set, pool):
    plain, mixed = pair(alpha=0.0)
    comparison = grad_norm_compare(tiny_network, test_set.images[:3], plain, mixed, pool)
    for trace in comparison.traces:
        assert len(set(trace.plain)) == 1
        assert len(trace.mixed) == 3
    frame = comparison.to_frame()
    assert list(frame.columns) == ["sample", "step", "plain_grad_norm", "mixed_grad_norm"]
    assert len(frame) == 9


def test_unit_ratio_gives_identical_traces(tiny_network, test_set, pool):
    task = AuxTaskSpec.for_kind("rotation", ratio_spec=MixupRatioSpec(low=1.0, high=1.0))
    plain, mixed = pair(task=task)
    comparison = grad_norm_compare(tiny_network, test_set.images[:4], plain, mixed, pool)
    assert all(trace.plain == trace.mixed for trace in comparison.traces)
    assert comparison.p_value == 1.0
    assert comparison.passed
    assert comparison.summary()["n_samples"] == 4


def test_paired_configs_must_match(tiny_network, test_set, pool):
    plain, mixed = pair()
    with pytest.raises(ConfigurationError):
        grad_norm_compare(tiny_network, test_set.images[:2], plain.model_copy(update={"alpha": 0.5}), mixed, pool)


# ---- drift ----------------------------------------------------------------


def test_tight_clusters_have_zero_index():
    features = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    report = drift_analysis({0: features}, [0, 0, 1, 1])
    assert report.db_index[0] == pytest.approx(0.0, abs=1e-12)


def test_index_of_hand_built_clusters():
    features = np.array([[-1.0, 0.0], [1.0, 0.0], [3.0, 0.0], [5.0, 0.0]])
    # spreads 1 and 1, centroid distance 4
    report = drift_analysis({0: features}, [0, 0, 1, 1])
    assert report.db_index[0] == pytest.approx(0.5, abs=1e-12)


def test_index_invariant_to_duplication_and_isometry():
    rng = np.random.default_rng(0)
    features = np.concatenate([rng.normal(0, 1, (6, 3)), rng.normal(4, 1, (6, 3)), rng.normal(-4, 1, (6, 3))])
    labels = np.repeat([0, 1, 2], 6)
    base = drift_analysis({0: features}, labels).db_index[0]

    doubled = drift_analysis({0: np.concatenate([features, features])}, np.concatenate([labels, labels]))
    assert doubled.db_index[0] == pytest.approx(base, abs=1e-12)

    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    moved = drift_analysis({0: features @ q.T + np.array([2.0, -1.0, 0.5])}, labels)
    assert moved.db_index[0] == pytest.approx(base, abs=1e-12)


def test_singleton_class_is_excluded():
    features = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0], [9.0, 9.0]])
    report = drift_analysis({0: features}, [0, 0, 1, 1, 2])
    expected = drift_analysis({0: features[:4]}, [0, 0, 1, 1])
    assert report.excluded_classes == [2]
    assert report.db_index[0] == pytest.approx(expected.db_index[0])
    assert len(report.coordinates) == 4


def test_single_class_rejected():
    with pytest.raises(InputError):
        drift_analysis({0: np.zeros((3, 2))}, [1, 1, 1])


def test_degenerate_snapshot_is_flagged():
    spread = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0]])
    report = drift_analysis({0: spread, 10: np.ones((4, 2))}, [0, 0, 1, 1])
    assert report.steps == [0, 10]
    assert report.degenerate == [False, True]
    assert report.any_degenerate
    assert is_degenerate(np.ones((4, 2)))
    assert drift_delta(report) == pytest.approx(report.db_index[1] - report.db_index[0])


def test_projection_properties():
    rng = np.random.default_rng(1)
    features = rng.normal(size=(10, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.1])
    coords = project_2d(features)
    assert coords.shape == (10, 2)
    assert np.allclose(coords.mean(axis=0), 0.0)
    assert coords[:, 0].var() >= coords[:, 1].var()
    assert np.array_equal(coords, project_2d(features))


def test_projection_of_planar_points_is_a_rotation():
    rng = np.random.default_rng(2)
    features = rng.normal(size=(12, 2)) * np.array([3.0, 1.0]) + np.array([1.0, -2.0])
    coords = project_2d(features)
    centred = features - features.mean(axis=0)
    assert np.allclose(np.linalg.norm(coords, axis=1), np.linalg.norm(centred, axis=1), atol=1e-12)
    assert np.allclose(coords @ coords.T, centred @ centred.T, atol=1e-10)
    assert coords.var(axis=0).sum() == pytest.approx(centred.var(axis=0).sum(), rel=1e-12)


def test_projection_of_rank_one_points():
    rng = np.random.default_rng(3)
    direction = np.array([1.0, -2.0, 0.5, 3.0])
    features = rng.normal(size=(8, 1)) * direction
    coords = project_2d(features)
    along = (features - features.mean(axis=0)) @ direction / np.linalg.norm(direction)
    assert np.abs(coords[:, 1]).max() <= 1e-12
    assert np.allclose(np.abs(coords[:, 0]), np.abs(along))


def test_projection_largest_loading_is_positive():
    rng = np.random.default_rng(5)
    features = rng.normal(size=(20, 4)) * np.array([4.0, 2.0, 1.0, 0.5])
    for flipped in (features, -features):
        coords = project_2d(flipped)
        centred = flipped - flipped.mean(axis=0)
        loadings, *_ = np.linalg.lstsq(centred, coords, rcond=None)
        for column in loadings.T:
            assert column[np.argmax(np.abs(column))] > 0


def test_projection_needs_two_points():
    with pytest.raises(InputError):
        project_2d(np.ones((1, 4)))


def test_drift_experiment_on_tiny_network(tiny_network, test_set, pool):
    config = EpisodeConfig(alpha=1e-2, steps=1, batch_size=4)
    report = drift_experiment(tiny_network, test_set, config, pool, checkpoints=(1, 2))
    assert report.steps == [0, 1, 2]
    assert len(report.db_index) == 3
    assert set(report.coordinates.columns) == {"id", "label", "pc1", "pc2", "step"}
    assert not report.any_degenerate
