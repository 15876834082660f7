"""avsep: desk-scale audio-visual sound source separation and localization."""

__version__ = "0.1.0"
