"""prosodyflow: stochastic per-token prosody regression and evaluation."""

__version__ = "0.1.0"
