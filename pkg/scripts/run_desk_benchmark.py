#!/usr/bin/env python3
"""
Desk-scale directional benchmark
Pretrains a small network per seed and compares baseline, plain TTT and MixTTT
over the six native corruptions at severity 5
"""

import sys
import logging
from pathlib import Path

import pandas as pd

# Add src to path so we can import our modules
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from mixttt.config.settings import settings
from mixttt.data.corruptions import NATIVE_CORRUPTIONS, CorruptionSpec, corrupt_dataset
from mixttt.data.datasets import make_synthetic_dataset
from mixttt.models.network import NetworkSpec, build_network
from mixttt.ttt.aux_tasks import AuxTaskSpec, compute_train_feature_stats
from mixttt.ttt.engine import EpisodeConfig, PretrainConfig, default_methods, pretrain, run_suite, summarize_error_table
from mixttt.ttt.mixup import TrainPartnerPool
from mixttt.utils.reports import write_csv

# Setup logging
logging.basicConfig(
    level=getattr(logging, settings.log_level),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SEEDS = (0, 1, 2)
TRAIN_SIZE = 5000
TEST_SIZE = 200
SEVERITY = 5
OUTPUT_DIR = Path("out/benchmark")
NOISE_CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise")


def run_seed(seed: int) -> pd.DataFrame:
    """One pretraining run and the full corruption suite for a seed"""
    train = make_synthetic_dataset(TRAIN_SIZE, seed=100 + seed)
    test = make_synthetic_dataset(TEST_SIZE, seed=200 + seed)

    spec = NetworkSpec.desk_default().model_copy(update={"dtype": "float32"})
    network = build_network(spec, seed)
    logger.info(f"🧠 Seed {seed}: pretraining on {len(train)} images")
    pretrain(network, train, PretrainConfig(epochs=10, seed=seed))
    feature_stats = compute_train_feature_stats(network, train.images)

    test_sets = {
        (kind, SEVERITY): corrupt_dataset(test, CorruptionSpec(kind=kind, severity=SEVERITY, seed=seed))
        for kind in NATIVE_CORRUPTIONS
    }
    episode = EpisodeConfig(alpha=1e-3, steps=10, task=AuxTaskSpec.for_kind("rotation"), seed=seed)
    pool = TrainPartnerPool(train)
    return run_suite(
        network, test_sets, default_methods(episode), pool, feature_stats, threads=settings.thread_cap, seed=seed
    )


def main():
    """Run every seed and report the directional comparisons"""
    logger.info("🚀 Starting desk-scale benchmark...")
    errors = pd.concat([run_seed(seed) for seed in SEEDS], ignore_index=True)
    summary = summarize_error_table(errors)

    write_csv(errors, OUTPUT_DIR / "errors.csv", "benchmark")
    write_csv(summary, OUTPUT_DIR / "errors_summary.csv", "benchmark")
    logger.info("\n" + summary.to_string(index=False, float_format=lambda v: f"{v:.2f}"))

    means = summary.set_index("method")
    mix_ok = means.loc["mixttt", "avg"] <= means.loc["ttt", "avg"]
    noise_ok = all(means.loc["ttt", kind] <= means.loc["baseline", kind] for kind in NOISE_CORRUPTIONS)
    logger.info(f"{'✅' if mix_ok else '❌'} MixTTT mean error <= plain TTT mean error")
    logger.info(f"{'✅' if noise_ok else '❌'} plain TTT <= baseline on the noise corruptions")


if __name__ == "__main__":
    main()
