"""Gridworld navigation agent with a latent cognitive map and concurrent spatial queries."""

__version__ = "0.1.0"
