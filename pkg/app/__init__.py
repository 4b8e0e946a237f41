"""Batch-job scheduling simulator and reinforcement-learning scheduler."""

__version__ = "1.0.0"
