"""Model-based clustering and classification of curves."""
