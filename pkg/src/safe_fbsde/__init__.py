"""Decentralized safe multi-agent stochastic control with a consensus-ADMM
safety layer inside a deep FBSDE learner."""

__version__ = "0.1.0"
