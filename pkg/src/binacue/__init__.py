"""Binaural cue measurement, ITD-to-ILD HRTF manipulation and listening-test tooling."""

__version__ = "0.1.0"
