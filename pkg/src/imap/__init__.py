"""Implicit multi-agent preference learning with dual-advantage MAPPO."""

__version__ = "0.1.0"
