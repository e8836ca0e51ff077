"""Continual model improvement on data streams: warm start with feature-centroid
regularisation and adaptive distillation, plus the usual baselines."""

__version__ = "0.1.0"
