"""Invariance-driven graph transformer for out-of-distribution graph
classification, on a from-scratch float64 autodiff engine."""

__version__ = "0.1.0"
