"""Tidemark segmentation pipeline for contrast-enhanced micro-CT."""

__version__ = "0.1.0"
