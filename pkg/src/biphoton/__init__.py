"""Simulation and analysis toolkit for narrowband SFWM photon pairs in cold atoms."""

__version__ = "0.1.0"
