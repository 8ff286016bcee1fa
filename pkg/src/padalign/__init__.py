"""Simulation toolkit for vision-guided wireless chargepad alignment."""

__version__ = "0.1.0"
