"""Connectivity tracing suite: probing, simulation, storage and analytics."""

__version__ = "0.1.0"
