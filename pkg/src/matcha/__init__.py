"""Unified correspondence features: fusion, merging, supervision, evaluation."""

__version__ = "0.1.0"
