"""Keypoint subset selection for vision-based robot pose estimation."""

__version__ = "0.1.0"
