"""Conditional inferential privacy for Gaussian-process traces."""
