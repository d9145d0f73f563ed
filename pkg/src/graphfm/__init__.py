"""Functional-map matrix completion and dimensionality reduction on graphs."""
