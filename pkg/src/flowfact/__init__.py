"""Optical-flow factorization and mid-level representation RL toolkit."""

__version__ = "0.1.0"
