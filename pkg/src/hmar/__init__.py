"""Hierarchical masked attention for multi-behavior sequential recommendation."""
