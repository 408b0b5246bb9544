"""Planar dual-arm grasping of large flat objects: simulator, learner and benchmark harness."""

__version__ = "0.1.0"
