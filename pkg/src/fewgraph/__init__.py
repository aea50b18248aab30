"""Few-shot, semi-supervised and active-learning classification on episode graphs."""

__version__ = "0.1.0"
