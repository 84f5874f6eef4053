"""Imitation-learning motion planner with displacement-aware encoding and a mixture-of-experts decoder."""

__version__ = "0.1.0"
