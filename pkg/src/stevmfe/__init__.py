"""Space-time enhanced-velocity mixed finite element solver for porous-media flow."""

__version__ = "0.1.0"
