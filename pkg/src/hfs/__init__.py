"""Deterministic federated-learning simulator for hypernetwork-generated CNNs (HFN)."""

__version__ = "0.1.0"
