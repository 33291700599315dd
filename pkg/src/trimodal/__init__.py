"""Tri-modal driving-hazard recognition."""
__version__ = "0.1.0"
