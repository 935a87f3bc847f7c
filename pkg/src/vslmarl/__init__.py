"""MARL variable speed limit control toolkit."""

__version__ = "0.1.0"
