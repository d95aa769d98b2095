"""Amortized tabular clustering: synthetic task priors, a partition inference
network trained with differentiable partition metrics, a cardinality head,
and classical baselines for comparison."""

__version__ = "0.1.0"
