"""Coarse-to-fine mask pruning for graph convolutional networks."""
