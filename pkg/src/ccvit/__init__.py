"""Centroid-centered masked image modeling at desk scale.

A self-contained pipeline: a non-parametric k-means patch tokenizer, a
mask/replace image-corruption scheme, a dual-objective ViT encoder trained
with a custom reverse-mode autodiff substrate, and a tokenizer-robustness
benchmark harness.
"""

__version__ = "0.1.0"
