"""Weakly supervised point-cloud pseudo-labeling with weighted hypergraph convolution."""
