"""Detection-model bridge emitting camera-trap batch JSON."""

__version__ = "0.1.0"
