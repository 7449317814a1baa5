"""Shared fixtures: tiny float64 networks and synthetic datasets."""

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from mixttt.data.datasets import make_synthetic_dataset  # noqa: E402
from mixttt.models.network import LayerSpec, NetworkSpec, build_network  # noqa: E402
from mixttt.ttt.aux_tasks import compute_train_feature_stats  # noqa: E402
from mixttt.ttt.mixup import TrainPartnerPool  # noqa: E402


@pytest.fixture
def tiny_spec():
    return NetworkSpec(
        input_shape=(3, 8, 8),
        encoder_layers=[LayerSpec(kind="conv", width=4), LayerSpec(kind="conv", width=6, stride=2)],
        main_classes=4,
    )


@pytest.fixture
def tiny_network(tiny_spec):
    network = build_network(tiny_spec, seed=0)
    network.eval()
    return network


@pytest.fixture
def train_set():
    return make_synthetic_dataset(48, num_classes=4, image_size=8, seed=0)


@pytest.fixture
def test_set():
    return make_synthetic_dataset(12, num_classes=4, image_size=8, seed=1)


@pytest.fixture
def pool(train_set):
    return TrainPartnerPool(train_set)


@pytest.fixture
def feature_stats(tiny_network, train_set):
    return compute_train_feature_stats(tiny_network, train_set.images)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)
