"""Data-from-Model toolkit: extract datasets from trained classifiers and
retrain fresh models on them by logit matching."""

__version__ = "0.1.0"
