"""Probabilistic future instance prediction in bird's-eye view, desk scale.

Surround pinhole cameras are lifted to a metric BEV raster, fused over time,
pushed through a variational future model, and decoded into temporally
consistent instance segmentations. Everything runs on a small float64
autodiff tensor library; a synthetic box-world supplies training data and
ground truth.
"""

from bevcast.tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
