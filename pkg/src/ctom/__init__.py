"""Colored transparent object matting: matte model, compositing, losses,
metrics, synthetic data and a small two-stage network."""

from .matte import ColorlessMatte, Matte, binarize_mask, composite, composite_colorless, identity_matte

__all__ = ["Matte", "ColorlessMatte", "composite", "composite_colorless", "identity_matte", "binarize_mask"]
__version__ = "0.1.0"
