"""Availability-aware fusion of camera, lidar and radar BEV feature maps."""

__version__ = "0.1.0"
