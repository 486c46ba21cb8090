"""Dependability-oriented training and auditing for concept-bottleneck regressors."""

__version__ = "0.1.0"
