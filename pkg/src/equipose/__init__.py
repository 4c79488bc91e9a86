"""Rotation-equivariant point-cloud features and keypoint-voting 6D pose estimation."""

__version__ = "0.1.0"
