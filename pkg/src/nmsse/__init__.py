"""Stochastic wavefunction simulation of open quantum dynamics with
neural forecasting of the long-time evolution."""

__version__ = "0.1.0"
