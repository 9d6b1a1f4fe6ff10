"""Simulation and inference for the labeled stochastic block model and the
broadcast process on trees."""

__version__ = "0.1.0"
