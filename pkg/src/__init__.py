"""rankstack - gradient-boosted micro-adapters with rank and bound diagnostics."""
