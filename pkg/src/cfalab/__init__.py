"""Compositional feature augmentation for long-tailed scene-graph predicates."""

__version__ = "0.1.0"
