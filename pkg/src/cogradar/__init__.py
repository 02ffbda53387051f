"""Cognitive radar spectrum-sharing simulator with tabular and deep RL agents."""

__version__ = "0.1.0"
