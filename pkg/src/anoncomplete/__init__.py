"""Code completion over flattened ASTs with anonymized variable names."""
__version__ = "0.1.0"
