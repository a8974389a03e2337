"""Trap-aware model-predictive control on a planar contact benchmark."""

__version__ = "0.1.0"
