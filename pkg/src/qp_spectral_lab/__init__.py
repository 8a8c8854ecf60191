"""Numerical laboratory for quasi-periodic operators with Gevrey long-range hopping."""

__version__ = "0.1.0"
