"""Uncertainty-aware importance-weighted mixup and subpopulation-shift baselines."""

__version__ = "0.1.0"
