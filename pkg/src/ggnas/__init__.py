"""Graph-guided differentiable architecture search for fast segmentation nets."""

__version__ = "0.1.0"
