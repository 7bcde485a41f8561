"""Octant-aware point cloud semantic segmentation toolkit."""

from .cloud import PointCloud

__all__ = ["PointCloud"]
__version__ = "0.1.0"
