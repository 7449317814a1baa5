"""MixTTT: test-time training with training-partner mixup."""

__version__ = "0.1.0"
