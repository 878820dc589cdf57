"""Ensemble Robin-Robin domain decomposition for the Stokes-Darcy problem
with random hydraulic conductivity, with Monte Carlo and multilevel Monte
Carlo drivers."""

__version__ = "0.1.0"
