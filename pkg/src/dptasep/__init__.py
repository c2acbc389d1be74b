"""Discrete-time parallel TASEP numerics: simulation, exact oracles,
spectral distribution formulas, and their large-time scaling limits."""

__version__ = "0.1.0"
