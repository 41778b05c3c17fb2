"""Data-free generative replay for class-incremental learning on imbalanced data."""

__version__ = "0.1.0"
