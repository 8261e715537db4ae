"""Recurrent-network macromodels of nonlinear high-speed links."""

__version__ = "0.1.0"
