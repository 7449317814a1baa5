"""Tests for auxiliary losses, rotation handling and task objects."""

import math

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from mixttt.ttt.aux_tasks import (
    AuxTaskSpec,
    TrainFeatureStats,
    augment_views,
    build_aux_task,
    collect_affine_params,
    contrastive_alignment_loss,
    cross_entropy,
    entropy_loss,
    moment_alignment_loss,
    nt_xent_loss,
    rotation_expand,
    rotation_restore,
)
from mixttt.ttt.mixup import build_plain_batch
from mixttt.utils.errors import ConfigurationError, InputError


def test_rotation_of_hand_built_image():
    image = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    rotated = rotation_expand(image)
    assert torch.equal(rotated.images[0], image[0])
    assert torch.equal(rotated.images[1], torch.tensor([[[2.0, 4.0], [1.0, 3.0]]]))
    assert rotated.images[1, 0, 0, 0] == image[0, 0, 0, 1]
    assert rotated.labels.tolist() == [0, 1, 2, 3]


def test_rotation_group_property():
    batch = torch.rand(3, 2, 5, 5)
    rotated = rotation_expand(batch)
    twice = torch.rot90(rotated.images[3:6], 1, dims=(2, 3))
    assert torch.equal(twice, rotated.images[6:9])
    assert rotated.images.shape == (12, 2, 5, 5)
    assert rotated.source_count == 3


def test_rotation_restore_recovers_sources():
    batch = torch.rand(2, 3, 4, 4)
    restored = rotation_restore(rotation_expand(batch))
    for k in range(4):
        assert torch.equal(restored[2 * k : 2 * k + 2], batch)


def test_rotation_rejects_non_square():
    with pytest.raises(InputError):
        rotation_expand(torch.zeros(1, 3, 4, 5))


def test_cross_entropy_values():
    assert cross_entropy(torch.zeros(1, 4), torch.tensor([2])).item() == pytest.approx(math.log(4), abs=1e-4)
    saturated = torch.tensor([[100.0, 0.0, 0.0]], dtype=torch.float64)
    assert cross_entropy(saturated, torch.tensor([0])).item() == pytest.approx(0.0, abs=1e-10)


def test_cross_entropy_matches_direct_formula():
    generator = torch.Generator().manual_seed(0)
    logits = torch.rand(6, 4, generator=generator, dtype=torch.float64) * 2 - 1
    labels = torch.tensor([0, 3, 1, 2, 2, 0])
    direct = -torch.log_softmax(logits, dim=1)[torch.arange(6), labels].mean()
    assert abs(cross_entropy(logits, labels).item() - direct.item()) <= 1e-9
    one_hot_rows = torch.nn.functional.one_hot(labels, 4).to(torch.float64)
    assert abs(cross_entropy(logits, one_hot_rows).item() - direct.item()) <= 1e-9


def test_cross_entropy_shift_invariance():
    logits = torch.rand(5, 4, dtype=torch.float64)
    labels = torch.tensor([1, 0, 3, 2, 1])
    assert abs(cross_entropy(logits, labels).item() - cross_entropy(logits + 7.5, labels).item()) <= 1e-9


def test_entropy_values():
    assert entropy_loss(torch.zeros(3, 10, dtype=torch.float64)).item() == pytest.approx(math.log(10), abs=1e-4)
    assert entropy_loss(torch.zeros(1, 2, dtype=torch.float64)).item() == pytest.approx(math.log(2), abs=1e-4)
    assert entropy_loss(torch.tensor([[50.0, 0.0, 0.0]], dtype=torch.float64)).item() == pytest.approx(0.0, abs=1e-9)


def test_entropy_decreases_when_one_logit_rises():
    uniform = torch.zeros(1, 5, dtype=torch.float64)
    raised = uniform.clone()
    raised[0, 2] = 1e-3
    assert entropy_loss(raised).item() < entropy_loss(uniform).item()
    assert entropy_loss(uniform).item() == pytest.approx(math.log(5), abs=1e-10)


def test_nt_xent_prefers_matching_pairs():
    eye = torch.eye(3, dtype=torch.float64)
    matched = nt_xent_loss(eye, eye, temperature=0.5)
    swapped = nt_xent_loss(eye, eye[[1, 2, 0]], temperature=0.5)
    expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 4.0))
    assert matched.item() == pytest.approx(expected, abs=1e-9)
    assert matched.item() < swapped.item()


def test_nt_xent_needs_two_rows():
    with pytest.raises(InputError):
        nt_xent_loss(torch.ones(1, 3), torch.ones(1, 3))


def test_alignment_zero_at_matching_statistics():
    features = torch.rand(8, 5, dtype=torch.float64)
    stats = TrainFeatureStats(mean=features.mean(dim=0), var=features.var(dim=0, unbiased=False))
    assert moment_alignment_loss(features, stats).item() == pytest.approx(0.0, abs=1e-15)


def test_alignment_only_weights(tiny_network, test_set, feature_stats):
    views = test_set.images[:4]
    mixed = test_set.images[4:8]
    combined = contrastive_alignment_loss(
        tiny_network, views, mixed, feature_stats, {"contrastive": 0.0, "alignment": 1.0}
    )
    direct = moment_alignment_loss(tiny_network.forward_features(mixed), feature_stats)
    assert combined.item() == pytest.approx(direct.item(), rel=1e-12)


def test_contrastive_term_needs_batch_of_two(tiny_network, test_set, feature_stats):
    with pytest.raises(InputError):
        contrastive_alignment_loss(
            tiny_network, test_set.images[:1], test_set.images[1:2], feature_stats, {"contrastive": 1.0, "alignment": 1.0}
        )


def test_affine_selector_size(tiny_network):
    selector = collect_affine_params(tiny_network)
    assert selector.size(tiny_network) == 2 * (4 + 6)


def test_spec_pairs_kind_and_subset():
    assert AuxTaskSpec.for_kind("entropy_min").param_subset == "norm_affine_only"
    assert AuxTaskSpec.for_kind("rotation").ratio_spec.low == 0.7
    assert AuxTaskSpec.for_kind("contrastive_align").ratio_spec.low == 0.9
    with pytest.raises(ValidationError):
        AuxTaskSpec.for_kind("entropy_min", param_subset="encoder_full")
    with pytest.raises(ValidationError):
        AuxTaskSpec.for_kind("rotation", param_subset="norm_affine_only")


def test_contrastive_task_requires_statistics():
    with pytest.raises(ConfigurationError):
        build_aux_task(AuxTaskSpec.for_kind("contrastive_align"))


def test_augmented_views_keep_shape_and_are_seeded(test_set):
    first = augment_views(test_set.images[:4], np.random.default_rng(0))
    second = augment_views(test_set.images[:4], np.random.default_rng(0))
    assert first.shape == (4, 3, 8, 8)
    assert torch.equal(first, second)


@pytest.mark.parametrize("kind", ["rotation", "entropy_min", "contrastive_align"])
def test_task_losses_are_finite_scalars(kind, tiny_network, test_set, feature_stats):
    task = build_aux_task(AuxTaskSpec.for_kind(kind), feature_stats)
    batch = build_plain_batch(test_set.images[0], 4)
    loss = task.loss(tiny_network, batch, test_set.images[0], np.random.default_rng(0))
    assert loss.dim() == 0
    assert torch.isfinite(loss)
