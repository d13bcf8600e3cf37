"""Stochastic-control toolkit for a dark-pool market maker with lit-pool hedging."""

__version__ = "0.1.0"
