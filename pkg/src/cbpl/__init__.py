"""Constrained batch policy learning for portfolio rebalancing."""

__version__ = "0.1.0"
