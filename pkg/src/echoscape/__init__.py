"""Sonar energyscape simulation, next-frame prediction and predictive processing."""
__version__ = "0.1.0"
