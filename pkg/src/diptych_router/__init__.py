"""Multi-subject routing laboratory: diptych training and attention routing on a toy MM-DiT."""

__version__ = "0.1.0"
