"""A small enterprise service bus and a simulated federation of hospital record services."""

__version__ = "0.1.0"
