"""Natural canonical image video representation and edit propagation."""

__version__ = "0.1.0"
