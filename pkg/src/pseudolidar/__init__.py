"""Stereo + sparse-LiDAR pseudo-LiDAR pipeline at desk scale."""

__version__ = "0.1.0"
