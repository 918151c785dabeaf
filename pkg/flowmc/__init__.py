"""Neural importance sampling with coupling-layer normalizing flows."""

__version__ = "1.0.0"
