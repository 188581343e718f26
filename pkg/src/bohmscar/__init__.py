"""Bohmian trajectories, survival probability and scar functions in the quarter stadium."""

__version__ = "0.1.0"
