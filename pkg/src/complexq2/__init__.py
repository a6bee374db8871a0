"""Complex-valued transformer with 2-bit {+1, +i, -1, -i} weights."""

__version__ = "0.1.0"
