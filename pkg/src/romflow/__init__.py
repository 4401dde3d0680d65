"""Importance sampling for PDE threshold exceedance with a flow-based change of measure."""

__version__ = "0.1.0"
