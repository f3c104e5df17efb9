"""Gated-attention-head pruning and probing laboratory for a small transformer encoder."""

__version__ = "0.1.0"
