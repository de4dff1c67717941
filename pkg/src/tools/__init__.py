"""Adapters, models, boosting and bound computations for rankstack."""
