"""Swelling-driven drug release simulation and loading optimisation."""

__version__ = "0.1.0"

__all__ = ["__version__"]
