"""Counterfactually harmless algorithmic matching of refugees to locations."""

__version__ = "0.1.0"
