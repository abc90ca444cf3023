"""MeshNet volumetric atlas segmentation on plain numpy."""

__version__ = "0.1.0"
