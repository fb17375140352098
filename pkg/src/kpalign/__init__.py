"""Keypoint-constraint alignment of generated rollouts into robot trajectories."""

__version__ = "0.1.0"
