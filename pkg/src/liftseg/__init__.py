"""Class-agnostic 3D instance segmentation from lifted 2D masks."""

__version__ = "0.1.0"
