"""Surface-damage detection toolkit: a from-scratch numpy single-stage detector."""

__version__ = "0.1.0"
