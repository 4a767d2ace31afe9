"""Split-learning label-leakage laboratory: protocol, SecDT defense, attacks."""

__version__ = "0.1.0"
