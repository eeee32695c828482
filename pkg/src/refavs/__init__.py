"""Reasoning-then-segment training on synthetic audio-visual referring scenes."""

__version__ = "0.1.0"
