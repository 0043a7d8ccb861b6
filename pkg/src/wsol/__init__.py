"""Weakly supervised localization from class activation maps."""

__version__ = "0.1.0"
