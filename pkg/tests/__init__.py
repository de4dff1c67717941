"""Test suite for rankstack."""
