"""Simulation and verification toolkit for hydrodynamic-type SPDEs with Levy noise."""

__version__ = "0.1.0"
