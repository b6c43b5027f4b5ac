"""Deterministic pre-grasp manipulation environment and learner."""

__version__ = "0.1.0"
