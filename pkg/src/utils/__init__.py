"""Core utilities for rankstack."""
