"""Bayesian covariance regression on the internal nodes of a phylogenetic tree."""

__version__ = "0.1.0"
