"""Weakly supervised tiny-object classification with saliency-guided multiple-instance learning."""

__version__ = "0.1.0"
