"""Deterministic simulator for split-and-concatenate federated training."""

__version__ = "0.1.0"
