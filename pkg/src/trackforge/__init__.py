"""Multi-object mask tracking with gated multi-scale propagation and IoU-gated refinement."""

__version__ = "0.1.0"
