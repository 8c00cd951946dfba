"""Co-training semi-supervised 3D segmentation with fixed and dynamic pseudo-labels."""

__version__ = "0.1.0"
