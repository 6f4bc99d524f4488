"""Uncertainty-driven truncation of model-generated trajectories for offline RL."""

__version__ = "0.1.0"
