"""Bit-flip vulnerability analysis and hardware fault-attack simulation for
small neural network classifiers."""

__version__ = "0.1.0"
