"""Network-level traffic flow transition modeling on sparse observations."""

__version__ = "0.1.0"
