"""Adaptive Act/Think/Abstain routing over embedding density scores."""

__version__ = "0.1.0"
