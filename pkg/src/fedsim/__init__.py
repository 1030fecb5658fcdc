"""Deterministic federated-learning simulator with robust aggregators,
optimization-based poisoning attacks, and smoothing certificates."""

__version__ = "0.1.0"
