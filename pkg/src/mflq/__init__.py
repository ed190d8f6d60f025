"""Mean-field LQ stochastic control with jumps on an infinite horizon."""

__version__ = "0.1.0"
