"""Model predictive control tuned by reinforcement learning and multi-objective Bayesian optimization."""

__version__ = "0.1.0"
