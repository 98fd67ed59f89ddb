"""Synthetic world, logged datasets, evaluation metrics and baseline training."""
