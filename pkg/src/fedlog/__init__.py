"""Subgraph federated learning simulator with degree-aware prototypical
classifiers, server-side synthetic data and prompt-node generalization."""

__version__ = "0.1.0"
