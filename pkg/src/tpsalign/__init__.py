"""Thin-plate-spline alignment toolkit for weakly aligned RGB-thermal image pairs."""

__version__ = "0.1.0"
