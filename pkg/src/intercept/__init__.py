"""Belief-space interception planning for a jerk-limited arm."""

__version__ = "0.1.0"
