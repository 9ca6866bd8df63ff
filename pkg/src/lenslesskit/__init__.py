"""Coded-aperture lensless imaging: simulation, restoration and cost modelling."""

__version__ = "0.1.0"
