"""Boosted ensembles of angular-margin embedding models on the unit hypersphere."""

__version__ = "0.1.0"
