"""Simulation and verification tools for weighted random connection models."""

__version__ = "0.1.0"
