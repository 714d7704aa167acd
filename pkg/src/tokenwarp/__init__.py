"""Flow-guided token-warping attention for zero-shot video translation."""
