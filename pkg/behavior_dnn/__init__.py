"""Sparsely-connected, disjointly-trained DNNs for session-level behavior classification."""

__version__ = "0.1.0"
