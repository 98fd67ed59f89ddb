"""Monotone incentive-response modelling and budget-constrained allocation."""

__version__ = "0.1.0"
