"""Gated recurrent Bayesian smoother with learned forward and global trends."""

__version__ = "0.1.0"
