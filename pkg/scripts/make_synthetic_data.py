#!/usr/bin/env python3
"""
Desk-scale dataset generation
Writes the 10-class 32x32 synthetic train/test files used by the MixTTT commands
"""

import sys
import logging
from pathlib import Path

# Add src to path so we can import our modules
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from mixttt.config.settings import settings
from mixttt.data.datasets import make_synthetic_dataset, save_dataset

# Setup logging
logging.basicConfig(
    level=getattr(logging, settings.log_level),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

OUTPUT_DIR = Path("data")
TRAIN_SIZE = 10000
TEST_SIZE = 1000
NUM_CLASSES = 10


def main():
    """Generate train and test splits with disjoint seeds"""
    logger.info("🚀 Generating desk-scale synthetic data...")
    OUTPUT_DIR.mkdir(parents=True, exist_ok=True)

    splits = {"train": (TRAIN_SIZE, 0), "test": (TEST_SIZE, 1)}
    for name, (size, seed) in splits.items():
        dataset = make_synthetic_dataset(size, num_classes=NUM_CLASSES, seed=seed)
        path = OUTPUT_DIR / f"{name}.mttt"
        save_dataset(dataset, path)
        logger.info(f"✅ {name}: {len(dataset)} images -> {path}")

    logger.info(f"""
🎉 Synthetic data ready!
📁 Train: {OUTPUT_DIR / 'train.mttt'}
📁 Test:  {OUTPUT_DIR / 'test.mttt'}

🔍 Next steps:
   mixttt pretrain --config configs/desk.conf
   mixttt ttt --config configs/desk.conf
    """)


if __name__ == "__main__":
    main()
