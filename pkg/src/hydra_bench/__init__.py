"""Desk-scale multiview adversarial patch benchmark.

Synthetic calibrated multi-camera scenes, two toy multiview pedestrian
detectors (convolutional and deformable-attention fusion), the multiview and
attention-aware patch attacks, and the MODA/MODP evaluation harness.
"""
from .errors import HydraError

__version__ = "0.1.0"

__all__ = ["HydraError", "__version__"]
