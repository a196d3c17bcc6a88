"""Approximate value iteration for risk-aware Markov decision processes."""

__version__ = "0.1.0"
