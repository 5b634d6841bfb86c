"""Contamination-aware benchmark construction over hybrid (text + graph) knowledge."""

__version__ = "0.1.0"
