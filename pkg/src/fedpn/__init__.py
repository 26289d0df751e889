"""Federated posterior networks with uncertainty-driven model switching."""

__version__ = "0.1.0"
