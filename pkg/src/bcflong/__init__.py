"""Longitudinal Bayesian causal forests with sparse random effects."""

__version__ = "0.1.0"
