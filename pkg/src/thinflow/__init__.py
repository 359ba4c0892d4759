"""Thin-domain stochastic Navier-Stokes laboratory."""

__version__ = "0.1.0"
