"""Multi-wave two-phase sampling designs with prior-informed wave 1 and raking estimation."""

__version__ = "0.1.0"
