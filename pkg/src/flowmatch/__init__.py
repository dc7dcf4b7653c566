"""Reward-proportional sampling on DAGs: exact flow/value solvers,
rectified policy evaluation and GFlowNet / soft-RL baselines."""

__version__ = "0.1.0"
