"""Hierarchical neural sketch for graph-stream frequency estimation."""
