"""Influence functions for Simple Graph Convolution: estimate how removing edges,
nodes or training samples changes a fitted SGC model, without retraining."""

__version__ = "0.1.0"
